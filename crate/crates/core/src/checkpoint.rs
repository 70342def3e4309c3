//! Binary checkpoints and atomic file writes.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      "DUVLGCKPT"
//! version    u32
//! config     u64 length, UTF-8 key = value text
//! step       u64
//! rng        32-byte seed, u64 stream, u128 word position
//! params     u32 count, then per parameter:
//!              u32 name length, name, u32 rank, u64 extents, f64 values
//! optimizer  u64 step, f64 lr, beta1, beta2, eps, clip_norm,
//!            u32 count, then per parameter: u64 length, f64 m, f64 v
//! ```

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::DuVlgModel;
use crate::optim::{Adam, AdamConfig};
use crate::train::TrainState;

pub const MAGIC: &[u8; 9] = b"DUVLGCKPT";
pub const VERSION: u32 = 1;

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<ParamRecord>,
    pub optim: Adam,
}

impl Checkpoint {
    pub fn capture(state: &TrainState, config: &RunConfig) -> Self {
        let params = state
            .model
            .parameters()
            .into_iter()
            .map(|(name, t)| ParamRecord { name, shape: t.shape().to_vec(), data: t.to_vec() })
            .collect();
        Self {
            config: config.clone(),
            step: state.step,
            rng: RngState::capture(&state.rng),
            params,
            optim: state.optim.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, &p.data);
        }
        let o = &self.optim;
        out.extend_from_slice(&o.step.to_le_bytes());
        for x in [o.cfg.lr, o.cfg.beta1, o.cfg.beta2, o.cfg.eps, o.cfg.clip_norm] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(o.m.len() as u32).to_le_bytes());
        for (m, v) in o.m.iter().zip(&o.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic").map_or(true, |m| m != MAGIC) {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let cfg_len = r.len64("config length")?;
        let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
            .map_err(|_| Error::Malformed("config is not UTF-8".into()))?;
        let config = RunConfig::parse(cfg_text)?;
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let n = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32("parameter name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "parameter name")?.to_vec())
                .map_err(|_| Error::Malformed("parameter name is not UTF-8".into()))?;
            let rank = r.u32("parameter rank")? as usize;
            let shape = (0..rank).map(|_| r.len64("parameter shape")).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("parameter {name} is too large")))?;
            let data = r.f64s(numel, "parameter values")?;
            params.push(ParamRecord { name, shape, data });
        }
        let opt_step = r.u64("optimizer step")?;
        let mut hyper = [0.0; 5];
        for h in &mut hyper {
            *h = r.f64("optimizer settings")?;
        }
        let n_buf = r.u32("optimizer buffer count")? as usize;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..n_buf {
            let len = r.len64("optimizer buffer length")?;
            m.push(r.f64s(len, "optimizer moments")?);
            v.push(r.f64s(len, "optimizer moments")?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let cfg = AdamConfig { lr: hyper[0], beta1: hyper[1], beta2: hyper[2], eps: hyper[3], clip_norm: hyper[4] };
        Ok(Self {
            config,
            step,
            rng: RngState { seed, stream, word_pos },
            params,
            optim: Adam { cfg, step: opt_step, m, v },
        })
    }

    /// Rebuilds the model from the stored config and overwrites every
    /// parameter with the stored values.
    pub fn into_state(self) -> Result<(RunConfig, TrainState)> {
        let config = self.config.clone();
        let state = self.state_under(&config)?;
        Ok((config, state))
    }

    /// Like [`Checkpoint::into_state`] but builds the model from `config`,
    /// whose model-shaping keys must match the stored parameters. The
    /// optimizer takes its hyperparameters from `config`.
    pub fn state_under(self, config: &RunConfig) -> Result<TrainState> {
        let model = config.build_model()?;
        apply_params(&model, &self.params)?;
        let expected = model.parameters();
        if self.optim.m.len() != expected.len()
            || self.optim.m.iter().zip(&expected).any(|(m, (_, t))| m.len() != t.numel())
        {
            return Err(Error::Malformed("optimizer state does not match the parameters".into()));
        }
        let mut optim = self.optim;
        optim.cfg = config.adam();
        Ok(TrainState { model, optim, rng: self.rng.restore(), step: self.step })
    }
}

/// Copies `records` into `model`, checking names, order and shapes.
pub fn apply_params(model: &DuVlgModel, records: &[ParamRecord]) -> Result<()> {
    let params = model.parameters();
    if params.len() != records.len() {
        return Err(Error::Malformed(format!("{} parameters stored, model has {}", records.len(), params.len())));
    }
    for ((name, t), rec) in params.iter().zip(records) {
        if *name != rec.name {
            return Err(Error::Malformed(format!("expected parameter {name}, found {}", rec.name)));
        }
        if t.shape() != rec.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                found: rec.shape.clone(),
                expected: t.shape().to_vec(),
            });
        }
    }
    for ((_, t), rec) in params.iter().zip(records) {
        t.set_data(&rec.data)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, state: &TrainState, config: &RunConfig) -> Result<()> {
    write_atomic(path, &Checkpoint::capture(state, config).to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.reserve(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len64(&mut self, what: &'static str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Malformed(format!("{what} overflows")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or(Error::Truncated(what))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.apply_text("d_model = 8\nn_heads = 2\nd_ff = 8\nn_layers_enc = 1\nn_layers_dec = 1\nimage_size = 8").unwrap();
        c.validate().unwrap();
        c
    }

    fn state(c: &RunConfig) -> TrainState {
        TrainState::new(c.build_model().unwrap(), c.adam(), c.seed)
    }

    #[test]
    fn bytes_round_trip() {
        let c = small_config();
        let ck = Checkpoint::capture(&state(&c), &c);
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn distinct_errors() {
        let c = small_config();
        let bytes = Checkpoint::capture(&state(&c), &c).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[9] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::VersionMismatch { found: 99, .. })));
        for cut in [5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Truncated(_)) | Err(Error::BadMagic)));
        }
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    }

    #[test]
    fn shape_mismatch_detected() {
        let c = small_config();
        let mut ck = Checkpoint::capture(&state(&c), &c);
        ck.params[0].shape = vec![1, ck.params[0].data.len()];
        assert!(matches!(ck.into_state(), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::Rng;
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let _: [u64; 3] = a.random();
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }
}
