//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "STGD"  u32 version
//! u32 text_len  text            canonical `key = value` config + metadata
//! u32 count
//! count × { u32 name_len  name  u32 rank  rank × u32 dim  f32 values… }
//! u32 crc32 of everything above
//! ```
//!
//! Values are stored as `f32`, which is exact for `f32` models.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use super::{Model, ModelConfig, ModelError, ModelResult};
use crate::config::KeyValues;
use crate::nn::{Layer, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STGD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Everything outside the `model.` / `pooling.` namespaces, e.g. the
    /// feature settings and training metadata.
    pub metadata: KeyValues,
    pub tensors: Vec<NamedTensor>,
}

fn eof(what: &str) -> ModelError {
    ModelError::Io(io::Error::new(ErrorKind::UnexpectedEof, format!("checkpoint truncated in {what}")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> ModelResult<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(eof(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> ModelResult<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, metadata: KeyValues) -> Self {
        let tensors = model
            .named_state()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                values: t.to_f64_vec().into_iter().map(|v| v as f32).collect(),
            })
            .collect();
        Self {
            config: model.config().clone(),
            metadata,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = self.config.to_kv();
        text.merge(self.metadata.clone());
        let text = text.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> ModelResult<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(ModelError::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let text_len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.bytes(text_len, "config")?)
            .map_err(|_| ModelError::Corrupt("config text is not UTF-8".into()))?;
        let mut kv = KeyValues::parse(text)?;
        let mut model_kv = kv.split_namespace("model");
        model_kv.merge(kv.split_namespace("pooling"));
        let config = ModelConfig::from_kv(&mut model_kv)?;
        model_kv.finish()?;

        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("tensor name")? as usize;
            let name = String::from_utf8(r.bytes(name_len, "tensor name")?.to_vec())
                .map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32("tensor rank")? as usize;
            if rank * 4 > r.remaining() {
                return Err(eof("tensor dims"));
            }
            let shape = (0..rank)
                .map(|_| r.u32("tensor dims").map(|d| d as usize))
                .collect::<ModelResult<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = match n.and_then(|n| n.checked_mul(4)) {
                Some(b) if b <= r.remaining() => b / 4,
                _ => return Err(eof(&format!("values of {name}"))),
            };
            let values = r
                .bytes(n * 4, "tensor values")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        let body_end = r.pos;
        let crc = r.u32("checksum")?;
        if r.remaining() != 0 {
            return Err(ModelError::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        if crc32fast::hash(&bytes[..body_end]) != crc {
            return Err(ModelError::Corrupt("checksum mismatch".into()));
        }
        Ok(Self {
            config,
            metadata: kv,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> ModelResult<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> ModelResult<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies every tensor into `model`, which must have exactly the same
    /// set of parameter and buffer names and shapes.
    pub fn apply_to<T: Scalar>(&self, model: &mut Model<T>) -> ModelResult<()> {
        let mut table: BTreeMap<&str, &NamedTensor> = BTreeMap::new();
        for t in &self.tensors {
            if table.insert(&t.name, t).is_some() {
                return Err(ModelError::Corrupt(format!("tensor {} appears twice", t.name)));
            }
        }
        let expected = model.named_state().len();
        if expected != table.len() {
            let names: Vec<String> = model.named_state().into_iter().map(|(n, _)| n).collect();
            let extra: Vec<&str> = table.keys().copied().filter(|k| !names.iter().any(|n| n == k)).collect();
            return Err(ModelError::ShapeMismatch(format!(
                "model has {expected} tensors, checkpoint has {} (unexpected: {extra:?})",
                table.len()
            )));
        }
        let assign = |name: String, dst: &mut Tensor<T>| -> ModelResult<()> {
            let src = table
                .get(name.as_str())
                .ok_or_else(|| ModelError::ShapeMismatch(format!("checkpoint lacks {name}")))?;
            if src.shape != dst.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name}: checkpoint {:?}, model {:?}",
                    src.shape,
                    dst.shape()
                )));
            }
            if src.values.len() != dst.len() {
                return Err(ModelError::Corrupt(format!("{name}: value count does not match shape")));
            }
            for (d, &s) in dst.data.iter_mut().zip(&src.values) {
                *d = T::lit(s as f64);
            }
            Ok(())
        };
        for (name, t) in model.named_params_mut() {
            assign(name, t)?;
        }
        for (name, t) in model.named_buffers_mut() {
            assign(name, t)?;
        }
        Ok(())
    }

    pub fn into_model<T: Scalar>(&self) -> ModelResult<Model<T>> {
        let mut model = Model::build(self.config.clone(), 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }
}

impl<T: Scalar> Model<T> {
    pub fn save(&self, path: impl AsRef<Path>, metadata: KeyValues) -> ModelResult<()> {
        Checkpoint::from_model(self, metadata).save(path)
    }

    /// Loads a model and the checkpoint's metadata.
    pub fn load(path: impl AsRef<Path>) -> ModelResult<(Self, KeyValues)> {
        let ckpt = Checkpoint::load(path)?;
        let model = ckpt.into_model()?;
        Ok((model, ckpt.metadata))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StitchMode;
    use crate::nn::Phase;
    use crate::pooling::PoolingKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained_ish(kind: PoolingKind) -> Model<f32> {
        let mut m = Model::<f32>::build(ModelConfig::desk(kind), 9).unwrap();
        // move batchnorm statistics off their defaults
        let x = input(4, 16, 10, 1);
        m.forward(&x, StitchMode::Normal, Phase::Train).unwrap();
        m
    }

    fn input(n: usize, t: usize, f: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 1, t, f], (0..n * t * f).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn round_trip_preserves_infer_outputs() {
        for kind in PoolingKind::ALL {
            let mut m = trained_ish(kind);
            let mut meta = KeyValues::new();
            meta.set("meta.epoch", 3);
            let bytes = Checkpoint::from_model(&m, meta.clone()).to_bytes();
            let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(ckpt.metadata, meta);
            let mut back: Model<f32> = ckpt.into_model().unwrap();
            let x = input(2, 20, 10, 5);
            for mode in [StitchMode::Normal, StitchMode::Stitched] {
                let a = m.forward(&x, mode, Phase::Infer).unwrap();
                let b = back.forward(&x, mode, Phase::Infer).unwrap();
                assert_eq!(a.data, b.data, "{kind}");
            }
            assert_eq!(Checkpoint::from_model(&back, meta).to_bytes(), bytes);
        }
    }

    #[test]
    fn truncation_is_an_error_not_a_panic() {
        let bytes = Checkpoint::from_model(&trained_ish(PoolingKind::St), KeyValues::new()).to_bytes();
        for cut in [0, 3, 4, 7, 8, 11, 50, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(ModelError::Io(_)) | Err(ModelError::VersionMismatch { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_and_checksum_checked() {
        let mut bytes = Checkpoint::from_model(&trained_ish(PoolingKind::St), KeyValues::new()).to_bytes();
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(ModelError::VersionMismatch { found: 9, .. })));
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let ckpt = Checkpoint::from_model(&trained_ish(PoolingKind::St), KeyValues::new());
        let mut big = Model::<f32>::build(ModelConfig::paper(PoolingKind::St), 0).unwrap();
        assert!(matches!(ckpt.apply_to(&mut big), Err(ModelError::ShapeMismatch(_))));
        let mut other_pool = Model::<f32>::build(ModelConfig::desk(PoolingKind::Lde), 0).unwrap();
        assert!(matches!(ckpt.apply_to(&mut other_pool), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stgd");
        let m = trained_ish(PoolingKind::Mh);
        let mut meta = KeyValues::new();
        meta.set("features.kind", "lfcc");
        m.save(&path, meta.clone()).unwrap();
        let (_, back_meta) = Model::<f32>::load(&path).unwrap();
        assert_eq!(back_meta, meta);
        assert!(matches!(Model::<f32>::load(dir.path().join("missing")), Err(ModelError::Io(_))));
    }
}
