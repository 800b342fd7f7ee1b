//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "M3DSEGCK"
//! version   u32
//! mode      u8       b'A'..=b'D'
//! layers    g1 widths, g2 widths (u32 count + u32 each), classes u32
//! meta      u8 flag; when 1: score_hidden (count + each), k u32, f2_hidden (count + each)
//! arrays    u32 count; per array: u16 name length, name, u32 rank,
//!           u64 extents, f64 values in row-major order
//! ```
//!
//! Arrays appear in declared order: segmenter layers, then the meta
//! learner's layers in [`MetaState::tensors`] order.

use std::path::Path;

use crate::meta::{MetaPlan, MetaState};
use crate::psl::{LayerParams, LayerPlan, ParamBundle};
use crate::tensor::Tensor;
use crate::train::{Mode, Model};

pub const MAGIC: &[u8; 8] = b"M3DSEGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn widths(&mut self, w: &[usize]) {
        self.u32(w.len() as u32);
        for &x in w {
            self.u32(x as u32);
        }
    }
    fn array(&mut self, name: &str, t: &Tensor) {
        self.u16(name.len() as u16);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn widths(&mut self) -> Result<Vec<usize>, CheckpointError> {
        let n = self.u32()? as usize;
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }
    fn array(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let len = self.u16()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| Ok(self.u64()? as usize))
            .collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok((name, t))
    }
}

fn layer_names<'a>(prefix: &str, layers: &'a [LayerParams]) -> Vec<(String, &'a Tensor)> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("{prefix}.{i}.weight"), &l.weight),
                (format!("{prefix}.{i}.bias"), &l.bias),
            ]
        })
        .collect()
}

fn meta_names(meta: &MetaState) -> Vec<(String, &Tensor)> {
    let mut out = layer_names("meta.score", &meta.score);
    out.extend(layer_names(
        "meta.projection",
        std::slice::from_ref(&meta.projection),
    ));
    out.extend(layer_names("meta.f2", &meta.f2_hidden));
    out.extend(layer_names("meta.mu", &meta.mu_heads));
    out.extend(layer_names("meta.log_sigma", &meta.log_sigma_heads));
    out
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(model.mode.as_byte());
    let plan = &model.bundle.plan;
    w.widths(&plan.g1);
    w.widths(&plan.g2);
    w.u32(plan.classes as u32);
    let mut arrays = layer_names("theta_t", &model.bundle.theta_t);
    match &model.meta {
        Some(meta) => {
            w.u8(1);
            w.widths(&meta.plan.score_hidden);
            w.u32(meta.plan.k as u32);
            w.widths(&meta.plan.f2_hidden);
            arrays.extend(meta_names(meta));
        }
        None => w.u8(0),
    }
    w.u32(arrays.len() as u32);
    for (name, t) in arrays {
        w.array(&name, t);
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<Model, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mode_byte = r.u8()?;
    let mode = Mode::from_byte(mode_byte)
        .ok_or_else(|| CheckpointError::Malformed(format!("mode byte {mode_byte:#04x}")))?;
    let plan = LayerPlan {
        g1: r.widths()?,
        g2: r.widths()?,
        classes: r.u32()? as usize,
    };
    plan.validate().map_err(CheckpointError::Malformed)?;
    let meta_plan = match r.u8()? {
        0 => None,
        1 => Some(MetaPlan {
            score_hidden: r.widths()?,
            k: r.u32()? as usize,
            f2_hidden: r.widths()?,
        }),
        f => return Err(CheckpointError::Malformed(format!("meta flag {f}"))),
    };
    if meta_plan.is_some() == (mode == Mode::A) {
        return Err(CheckpointError::Malformed(format!(
            "mode {mode} with meta flag {}",
            meta_plan.is_some()
        )));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        arrays.push(r.array()?);
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }

    let mut zero_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut bundle = ParamBundle::init(plan.clone(), &mut zero_rng);
    let meta = meta_plan.map(|p| MetaState::init(p, &plan, &mut zero_rng));
    let expected: Vec<String> = layer_names("theta_t", &bundle.theta_t)
        .into_iter()
        .chain(meta.iter().flat_map(meta_names))
        .map(|(n, _)| n)
        .collect();
    if expected.len() != arrays.len() {
        return Err(CheckpointError::Malformed(format!(
            "expected {} arrays, found {}",
            expected.len(),
            arrays.len()
        )));
    }
    for (want, (got, _)) in expected.iter().zip(&arrays) {
        if want != got {
            return Err(CheckpointError::Malformed(format!(
                "expected array {want:?}, found {got:?}"
            )));
        }
    }
    let mut values = arrays.into_iter().map(|(_, t)| t);
    let mut fill = |slot: &mut Tensor, name: &str| -> Result<(), CheckpointError> {
        let v = values.next().expect("count checked");
        if v.shape() != slot.shape() {
            return Err(CheckpointError::Malformed(format!(
                "{name}: shape {:?}, expected {:?}",
                v.shape(),
                slot.shape()
            )));
        }
        if !v.is_finite() {
            return Err(CheckpointError::Malformed(format!(
                "{name}: non-finite values"
            )));
        }
        *slot = v;
        Ok(())
    };
    let mut names = expected.iter();
    for l in &mut bundle.theta_t {
        fill(&mut l.weight, names.next().expect("name"))?;
        fill(&mut l.bias, names.next().expect("name"))?;
    }
    let meta = match meta {
        Some(mut m) => {
            for t in m.tensors_mut() {
                fill(t, names.next().expect("name"))?;
            }
            Some(m)
        }
        None => None,
    };
    Ok(Model { mode, bundle, meta })
}

pub fn save(path: &Path, model: &Model) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(mode: Mode) -> Model {
        let plan = LayerPlan {
            g1: vec![4, 5],
            g2: vec![6],
            classes: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bundle = ParamBundle::init(plan.clone(), &mut rng);
        let meta = (mode != Mode::A).then(|| {
            let mut m = MetaState::init(MetaPlan::default(), &plan, &mut rng);
            m.mu_heads[1].bias = m.mu_heads[1].bias.map(|_| 0.25);
            m
        });
        Model { mode, bundle, meta }
    }

    #[test]
    fn round_trip_every_mode() {
        for mode in Mode::ALL {
            let m = model(mode);
            let bytes = to_bytes(&m);
            assert_eq!(&bytes[..8], MAGIC);
            assert_eq!(from_bytes(&bytes).unwrap(), m);
            assert_eq!(to_bytes(&from_bytes(&bytes).unwrap()), bytes);
        }
    }

    #[test]
    fn mode_a_has_an_empty_meta_section() {
        let a = to_bytes(&model(Mode::A));
        let d = to_bytes(&model(Mode::D));
        assert!(a.len() < d.len());
        // magic, version, mode, g1 = [4, 5], g2 = [6], classes
        let flag_at = 8 + 4 + 1 + (4 + 8) + (4 + 4) + 4;
        assert_eq!(a[flag_at], 0);
        assert_eq!(
            u32::from_le_bytes(a[flag_at + 1..flag_at + 5].try_into().unwrap()),
            8
        );
        assert_eq!(d[flag_at], 1);
        assert!(from_bytes(&a).unwrap().meta.is_none());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&model(Mode::D));
        assert!(matches!(
            from_bytes(b"nonsense"),
            Err(CheckpointError::Magic)
        ));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated)
        ));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(from_bytes(&v), Err(CheckpointError::Version(9))));
        let mut v = bytes.clone();
        v.push(0);
        assert!(matches!(from_bytes(&v), Err(CheckpointError::Malformed(_))));
        let mut v = bytes;
        v[12] = b'Z';
        assert!(matches!(from_bytes(&v), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        let m = model(Mode::C);
        save(&path, &m).unwrap();
        assert_eq!(load(&path).unwrap(), m);
        assert!(matches!(
            load(&dir.path().join("missing")),
            Err(CheckpointError::Io { .. })
        ));
    }
}
