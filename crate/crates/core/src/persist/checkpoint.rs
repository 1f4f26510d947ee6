use std::fs;
use std::path::Path;

use super::config::{parse_train_config, train_config_text};
use crate::error::{Error, Result};
use crate::net::{build_model, Model, ModelConfig, ParamKind};
use crate::train::{Adam, RngState, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FHSC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state: config echo, counters, RNG position, parameters,
/// BN running statistics and Adam moments.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub iteration: u64,
    pub rng: RngState,
    pub model: Model,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn of(t: &Trainer) -> Self {
        Checkpoint {
            config: t.config.clone(),
            epoch: t.epoch,
            iteration: t.iteration,
            rng: t.rng_state(),
            model: t.model.clone(),
            adam: t.adam.clone(),
        }
    }

    /// Fails with a config error unless the stored model matches `requested`.
    pub fn check_model(&self, requested: &ModelConfig) -> Result<()> {
        let have = &self.config.model;
        if have != requested {
            return Err(Error::Config(format!(
                "checkpoint model ({}) does not match the requested model ({})",
                describe(have),
                describe(requested)
            )));
        }
        Ok(())
    }

    /// Resumes training under `config`, whose model must match the stored one.
    /// Schedule fields (epochs, learning rate, ...) come from `config`.
    pub fn into_trainer(self, config: TrainConfig) -> Result<Trainer> {
        self.check_model(&config.model)?;
        let mut adam = self.adam;
        adam.config = config.adam;
        Trainer::from_parts(config, self.model, adam, self.rng, self.epoch, self.iteration)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&train_config_text(&self.config));
        w.u64(self.epoch as u64);
        w.u64(self.iteration);
        w.0.extend_from_slice(&self.rng.seed);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        let store = self.model.store();
        w.u32(store.len() as u32);
        for p in store.iter() {
            w.str(&p.name);
            w.str(p.kind.name());
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.f64s(p.value.data());
        }
        w.u32(store.running_stats().len() as u32);
        for (name, s) in store.running_stats() {
            w.str(name);
            w.u64(s.mean.len() as u64);
            w.f64s(&s.mean);
            w.f64s(&s.var);
        }
        w.u64(self.adam.t);
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            w.f64s(m);
            w.f64s(v);
        }
        w.0
    }

    /// Parses a checkpoint. `what` names the source in error messages.
    pub fn decode(bytes: &[u8], what: &str) -> Result<Self> {
        let mut r = Reader { buf: bytes, at: 0, what };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version > CHECKPOINT_VERSION {
            return Err(r.err(&format!(
                "format version {version} is newer than supported version {CHECKPOINT_VERSION}"
            )));
        }
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported format version {version}")));
        }
        let config = parse_train_config(&r.str()?)
            .map_err(|e| r.err(&format!("bad config echo: {e}")))?;
        let epoch = r.u64()? as usize;
        let iteration = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));

        let mut model = build_model(&config.model, 0)
            .map_err(|e| r.err(&format!("config echo does not build a model: {e}")))?;
        let n = r.u32()? as usize;
        if n != model.store().len() {
            return Err(r.err(&format!(
                "{n} parameter records, the model has {}",
                model.store().len()
            )));
        }
        for p in model.store_mut().params_mut() {
            let name = r.str()?;
            let kind = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name != p.name || ParamKind::from_name(&kind) != Some(p.kind) || shape != p.value.shape()
            {
                return Err(r.err(&format!(
                    "record {name:?} ({kind}, {shape:?}) does not match parameter {:?} ({}, {:?})",
                    p.name,
                    p.kind.name(),
                    p.value.shape()
                )));
            }
            r.f64s_into(p.value.data_mut())?;
        }
        let ns = r.u32()? as usize;
        if ns != model.store().running_stats().len() {
            return Err(r.err("running statistics count does not match the model"));
        }
        for (name, s) in model.store_mut().running_stats_mut() {
            let got = r.str()?;
            let c = r.u64()? as usize;
            if got != *name || c != s.mean.len() {
                return Err(r.err(&format!("statistics record {got:?} does not match {name:?}")));
            }
            r.f64s_into(&mut s.mean)?;
            r.f64s_into(&mut s.var)?;
        }
        let mut adam = Adam::new(config.adam, model.store());
        adam.t = r.u64()?;
        for (m, v) in adam.m.iter_mut().zip(adam.v.iter_mut()) {
            r.f64s_into(m)?;
            r.f64s_into(v)?;
        }
        if r.at != bytes.len() {
            return Err(r.err(&format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            config,
            epoch,
            iteration,
            rng: RngState { seed, word_pos },
            model,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, &path.display().to_string())
    }
}

fn describe(c: &ModelConfig) -> String {
    format!(
        "depth {}, base {}, kernel {}, {}, gates {}, S {}, {} classes, {} input channels",
        c.depth,
        c.base_channels,
        c.kernel_size,
        c.skip_mode,
        if c.gates { "on" } else { "off" },
        c.skip_branch_channels,
        c.num_classes,
        c.input_channels
    )
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    what: &'a str,
}

impl Reader<'_> {
    fn err(&self, m: &str) -> Error {
        Error::Data(format!("{}: {m}", self.what))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.at < n {
            return Err(self.err(&format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?.to_vec();
        String::from_utf8(b).map_err(|_| self.err("string is not UTF-8"))
    }

    fn f64s_into(&mut self, out: &mut [f64]) -> Result<()> {
        let b = self.take(8 * out.len())?;
        for (o, c) in out.iter_mut().zip(b.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}
