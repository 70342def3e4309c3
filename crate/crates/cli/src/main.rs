fn main() {
    std::process::exit(duvlg_cli::run(std::env::args_os()));
}
