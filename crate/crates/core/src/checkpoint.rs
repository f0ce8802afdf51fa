//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `NDCKPT\0\0`, `u32` version, `u64` seed,
//! `u64` completed steps, `u64` optimizer step, `u32` entry count, then per
//! entry: `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` data.
//! Entries are `student/<param>`, `teacher/<param>`, `center`,
//! `adam_m/<param>` and `adam_v/<param>`. Every random stream is a pure
//! function of `(seed, step)`, so no generator state is stored.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::train::Trainer;

const MAGIC: &[u8; 8] = b"NDCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub opt_step: u64,
    pub entries: Vec<(String, Tensor)>,
}

fn vec_tensor(data: &[f64], shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), data.to_vec())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Result<Self> {
        let mut entries = Vec::new();
        for p in t.state.student.params() {
            entries.push((format!("student/{}", p.name), p.value.clone()));
        }
        for p in t.state.teacher.params() {
            entries.push((format!("teacher/{}", p.name), p.value.clone()));
        }
        entries.push(("center".into(), vec_tensor(&t.state.center, &[t.state.center.len()])?));
        for (i, p) in t.state.student.params().iter().enumerate() {
            entries.push((format!("adam_m/{}", p.name), vec_tensor(&t.opt.m[i], p.value.shape())?));
            entries.push((format!("adam_v/{}", p.name), vec_tensor(&t.opt.v[i], p.value.shape())?));
        }
        Ok(Self {
            seed: t.seed(),
            step: t.step,
            opt_step: t.opt.step,
            entries,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn take(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no entry `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Data(format!(
                "checkpoint entry `{name}` has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    fn fill(&self, prefix: &str, net: &mut Network) -> Result<()> {
        for p in net.params_mut() {
            let t = self.take(&format!("{prefix}/{}", p.name), p.value.shape())?;
            p.value.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Puts the saved state into a trainer built from the same setup.
    pub fn restore(&self, t: &mut Trainer) -> Result<()> {
        if self.seed != t.seed() {
            return Err(Error::Data(format!(
                "checkpoint seed {} differs from run seed {}",
                self.seed,
                t.seed()
            )));
        }
        if self.step > t.total_steps() {
            return Err(Error::Data(format!(
                "checkpoint is at step {} but the run has only {} steps",
                self.step,
                t.total_steps()
            )));
        }
        let mut student = t.state.student.clone();
        let mut teacher = t.state.teacher.clone();
        self.fill("student", &mut student)?;
        self.fill("teacher", &mut teacher)?;
        let k = t.state.center.len();
        let center = self.take("center", &[k])?.data().to_vec();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in student.params() {
            m.push(self.take(&format!("adam_m/{}", p.name), p.value.shape())?.data().to_vec());
            v.push(self.take(&format!("adam_v/{}", p.name), p.value.shape())?.data().to_vec());
        }
        t.state.student = student;
        t.state.teacher = teacher;
        t.state.center = center;
        t.opt.m = m;
        t.opt.v = v;
        t.opt.step = self.opt_step;
        t.step = self.step;
        Ok(())
    }

    /// The teacher network, for evaluation.
    pub fn teacher(&self, cfg: &ModelConfig) -> Result<Network> {
        let mut net = Network::new(cfg, &mut stream(0, Stream::Init, &[]))?;
        self.fill("teacher", &mut net)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.opt_step.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], file: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            file: file.to_path_buf(),
        };
        if r.take(8)? != MAGIC {
            return Err(r.err(0, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(8, &format!("unsupported checkpoint version {version}")));
        }
        let seed = r.u64()?;
        let step = r.u64()?;
        let opt_step = r.u64()?;
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err(at, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data_at = r.pos;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.err(data_at, "entry too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.err(data_at, &e.to_string()))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after the last entry"));
        }
        Ok(Self {
            seed,
            step,
            opt_step,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: PathBuf,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            file: self.file.clone(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthKind, SynthParams};
    use crate::model::EncoderKind;
    use crate::train::{TrainData, TrainSetup};

    fn setup() -> TrainSetup {
        let mut s = TrainSetup::default();
        s.model.encoder = EncoderKind::Mlp;
        s.model.mlp_hidden = vec![12];
        s.model.pool_grid = 4;
        s.model.out_dim = 6;
        s.augment.n_local = 2;
        s.train.batch_size = 4;
        s.train.epochs = 3;
        s.train.warmup_epochs = 1;
        s
    }

    #[test]
    fn byte_round_trip_and_resume() {
        let p = SynthParams::default();
        let ind = synth_dataset(SynthKind::Stripes, 8, 32, 1, &p).unwrap();
        let aux = synth_dataset(SynthKind::Blobs, 8, 32, 2, &p).unwrap();
        let d = TrainData {
            in_dist: &ind,
            auxiliary: Some(&aux),
        };
        let mut a = Trainer::new(setup(), 11, 8).unwrap();
        for _ in 0..2 {
            a.step(&d).unwrap();
        }
        let ck = Checkpoint::from_trainer(&a).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);

        let mut b = Trainer::new(setup(), 11, 8).unwrap();
        loaded.restore(&mut b).unwrap();
        for _ in 0..3 {
            assert_eq!(a.step(&d).unwrap(), b.step(&d).unwrap());
        }
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let t = Trainer::new(setup(), 1, 8).unwrap();
        let bytes = Checkpoint::from_trainer(&t).unwrap().to_bytes();
        let p = Path::new("x.ckpt");
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let t = Trainer::new(setup(), 1, 8).unwrap();
        let ck = Checkpoint::from_trainer(&t).unwrap();
        let mut other = setup();
        other.model.mlp_hidden = vec![10];
        let mut t2 = Trainer::new(other, 1, 8).unwrap();
        assert!(ck.restore(&mut t2).is_err());
    }
}
