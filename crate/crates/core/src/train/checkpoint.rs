//! Binary checkpoints.
//!
//! Layout (little endian): `b"MSRG"`, `u32` version, `u64` payload length,
//! payload, then the SHA-256 of the payload. The payload is a count-prefixed
//! list of string key/value pairs followed by a count-prefixed tensor table
//! of `(name, rank, dims as u64, f64 data)`. Strings are `u32` length + UTF-8.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::engine::TrainState;
use crate::arch::Network;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSRG";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents before they are applied to a state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing field `{key}`")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("field `{key}` has bad value `{v}`")))
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        let (_, t) = self.tensors.swap_remove(i);
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        put_u32(&mut p, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut p, k);
            put_str(&mut p, v);
        }
        put_u32(&mut p, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut p, name);
            put_u32(&mut p, t.rank() as u32);
            for &d in t.shape() {
                p.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                p.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(p.len() + 48);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        out.extend_from_slice(&Sha256::digest(&p));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let total = 16u64.checked_add(len).and_then(|n| n.checked_add(32));
        if total != Some(bytes.len() as u64) {
            return Err(Error::Checkpoint(format!(
                "truncated or padded: payload length {len} but file has {} bytes",
                bytes.len()
            )));
        }
        let payload = &bytes[16..16 + len as usize];
        if Sha256::digest(payload).as_slice() != &bytes[16 + len as usize..] {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad("dimension overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` larger than the file")))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            ck.tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes after tensor table"));
        }
        Ok(ck)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint(format!("bad rng seed `{s}`"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn network_tensors(prefix: &str, net: &Network, out: &mut Vec<(String, Tensor)>) {
    for l in &net.layers {
        for p in &l.params {
            out.push((format!("{prefix}/{}.{}", l.name(), p.name), p.tensor.clone()));
        }
        for s in &l.sn_state {
            let base = format!("{prefix}/{}.{}", l.name(), l.params[s.param].name);
            out.push((format!("{base}#u"), Tensor::new(&[s.u.len()], s.u.clone()).expect("vector")));
            out.push((format!("{base}#v"), Tensor::new(&[s.v.len()], s.v.clone()).expect("vector")));
        }
    }
}

fn adam_tensors(prefix: &str, opt: &AdamState, out: &mut Vec<(String, Tensor)>) {
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        out.push((format!("{prefix}/m{i}"), Tensor::new(&[m.len()], m.clone()).expect("vector")));
        out.push((format!("{prefix}/v{i}"), Tensor::new(&[v.len()], v.clone()).expect("vector")));
    }
}

/// Serializes everything that affects future steps.
pub fn checkpoint_of(state: &TrainState) -> Checkpoint {
    let c = &state.config;
    let meta = vec![
        ("preset", c.preset.name().to_string()),
        ("scale", c.scale.to_string()),
        ("config_hash", c.hash()),
        ("config", c.to_kv()),
        ("step", state.step.to_string()),
        ("epoch", state.epoch.to_string()),
        ("batch_in_epoch", state.batch_in_epoch.to_string()),
        ("rng_seed", hex(&state.rng.get_seed())),
        ("rng_stream", state.rng.get_stream().to_string()),
        ("rng_word_pos", state.rng.get_word_pos().to_string()),
        ("epoch_losses", join(&state.epoch_losses)),
        ("loss_sum", state.loss_sum.to_string()),
        ("loss_count", state.loss_count.to_string()),
        ("best_ssim", state.best_ssim.to_string()),
        ("best_epoch", state.best_epoch.to_string()),
        ("gen_adam_t", state.gen_opt.t.to_string()),
        ("disc_adam_t", state.disc_opt.t.to_string()),
    ];
    let mut tensors = Vec::new();
    network_tensors("gen", &state.gen, &mut tensors);
    network_tensors("disc", &state.disc, &mut tensors);
    adam_tensors("gen_adam", &state.gen_opt, &mut tensors);
    adam_tensors("disc_adam", &state.disc_opt, &mut tensors);
    Checkpoint {
        meta: meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        tensors,
    }
}

fn restore_network(prefix: &str, net: &mut Network, ck: &mut Checkpoint) -> Result<()> {
    for l in &mut net.layers {
        let lname = l.name().to_string();
        for p in &mut l.params {
            let name = format!("{prefix}/{lname}.{}", p.name);
            p.tensor = ck.take(&name, p.tensor.shape())?;
        }
        for s in &mut l.sn_state {
            let base = format!("{prefix}/{lname}.{}", l.params[s.param].name);
            s.u = ck.take(&format!("{base}#u"), &[s.u.len()])?.into_data();
            s.v = ck.take(&format!("{base}#v"), &[s.v.len()])?.into_data();
        }
    }
    Ok(())
}

fn restore_adam(prefix: &str, opt: &mut AdamState, t: u64, net: &Network, ck: &mut Checkpoint) -> Result<()> {
    opt.t = t;
    if t == 0 {
        return Ok(());
    }
    let sizes: Vec<usize> = net.params().iter().map(|p| p.numel()).collect();
    opt.m = Vec::with_capacity(sizes.len());
    opt.v = Vec::with_capacity(sizes.len());
    for (i, n) in sizes.into_iter().enumerate() {
        opt.m.push(ck.take(&format!("{prefix}/m{i}"), &[n])?.into_data());
        opt.v.push(ck.take(&format!("{prefix}/v{i}"), &[n])?.into_data());
    }
    Ok(())
}

/// Rebuilds a full training state from a decoded checkpoint.
pub fn state_from(mut ck: Checkpoint) -> Result<TrainState> {
    let config = TrainConfig::from_kv(ck.meta("config")?)?;
    if config.hash() != ck.meta("config_hash")? {
        return Err(Error::Checkpoint("stored config does not match its hash".into()));
    }
    let mut state = TrainState::new(config)?;
    restore_network("gen", &mut state.gen, &mut ck)?;
    restore_network("disc", &mut state.disc, &mut ck)?;
    let (gt, dt) = (ck.parsed("gen_adam_t")?, ck.parsed("disc_adam_t")?);
    restore_adam("gen_adam", &mut state.gen_opt, gt, &state.gen, &mut ck)?;
    restore_adam("disc_adam", &mut state.disc_opt, dt, &state.disc, &mut ck)?;
    if let Some((name, _)) = ck.tensors.first() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{name}` for this model")));
    }
    let mut rng = ChaCha8Rng::from_seed(unhex(ck.meta("rng_seed")?)?);
    rng.set_stream(ck.parsed("rng_stream")?);
    rng.set_word_pos(ck.parsed("rng_word_pos")?);
    state.rng = rng;
    state.step = ck.parsed("step")?;
    state.epoch = ck.parsed("epoch")?;
    state.batch_in_epoch = ck.parsed("batch_in_epoch")?;
    let losses = ck.meta("epoch_losses")?;
    state.epoch_losses = if losses.is_empty() {
        Vec::new()
    } else {
        losses
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("bad epoch loss `{v}`"))))
            .collect::<Result<_>>()?
    };
    state.loss_sum = ck.parsed("loss_sum")?;
    state.loss_count = ck.parsed("loss_count")?;
    state.best_ssim = ck.parsed("best_ssim")?;
    state.best_epoch = ck.parsed("best_epoch")?;
    state.last_saved = state.step;
    Ok(state)
}

/// Atomic write: a temporary sibling is renamed over `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = checkpoint_of(state).to_bytes();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, &bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    state_from(Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })?)
}

/// Loads a checkpoint to continue training under `config`, which must hash
/// the same as the one stored. Run-control fields are taken from `config`.
pub fn resume(path: &Path, config: &TrainConfig) -> Result<TrainState> {
    let mut state = load_checkpoint(path)?;
    if state.config.hash() != config.hash() {
        return Err(Error::Checkpoint(format!(
            "{} was written with config {} but the current config hashes to {}",
            path.display(),
            state.config.hash(),
            config.hash()
        )));
    }
    state.config = config.clone();
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Preset;
    use crate::data::AugmentConfig;

    fn state() -> TrainState {
        let mut c = TrainConfig::preset(Preset::CsrOptimized);
        c.scale = "2/25".parse().unwrap();
        c.residual_blocks = 1;
        c.sn_warmup = 5;
        c.augment = AugmentConfig::default();
        TrainState::new(c).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = state();
        let bytes = checkpoint_of(&s).to_bytes();
        let back = state_from(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(checkpoint_of(&back).to_bytes(), bytes);
        assert_eq!(back.gen, s.gen);
        assert_eq!(back.disc, s.disc);
    }

    #[test]
    fn corruption_detected() {
        let bytes = checkpoint_of(&state()).to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(Checkpoint::from_bytes(b"PNG\0not a checkpoint").is_err());
    }

    #[test]
    fn resume_rejects_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let s = state();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&s, &path).unwrap();
        let mut other = s.config.clone();
        assert!(resume(&path, &other).is_ok());
        other.gen_lr = 5e-4;
        assert!(matches!(resume(&path, &other), Err(Error::Checkpoint(_))));
    }
}
