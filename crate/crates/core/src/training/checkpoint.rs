use std::path::Path;

use super::trainer::MetricRecord;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::fusion::ReFilterConfig;
use crate::numerics::serial::{read_file, read_params, write_file, write_params, ByteReader, ByteWriter};
use crate::numerics::{AdamWConfig, OptimizerState, ParamStore};

const MAGIC: &[u8; 8] = b"RFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters of the best dev epoch so far.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub dev_metric: f64,
    pub epoch: usize,
    pub params: ParamStore,
}

/// Everything needed to continue a run bit-for-bit. Batch order and
/// dropout masks are pure functions of `seed` and the step counter, so
/// these two fully determine the random state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ReFilterConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    /// Completed optimizer steps.
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub best: Option<BestSnapshot>,
    pub log: Vec<MetricRecord>,
}

fn json<T: serde::Serialize>(x: &T) -> String {
    serde_json::to_string(x).expect("plain data serialises")
}

fn unjson<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Data(format!("checkpoint {what}: {e}")))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&json(&ck.model));
    w.str(&json(&ck.train));
    w.u64(ck.step as u64);
    w.u64(ck.epoch as u64);
    w.u64(ck.seed);
    write_params(&mut w, &ck.params);

    let o = &ck.optimizer;
    w.str(&json(&o.config));
    w.u64(o.total_steps as u64);
    w.u64(o.step as u64);
    w.u64(o.first_moment.len() as u64);
    for (m, v) in o.first_moment.iter().zip(&o.second_moment) {
        w.u64(m.len() as u64);
        w.f64s(m);
        w.f64s(v);
    }

    match &ck.best {
        Some(b) => {
            w.u8(1);
            w.f64(b.dev_metric);
            w.u64(b.epoch as u64);
            write_params(&mut w, &b.params);
        }
        None => w.u8(0),
    }
    w.str(&json(&ck.log));
    write_file(path, &w.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, "checkpoint");
    if r.take(8)? != MAGIC {
        return Err(Error::Incompatible(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "{}: format version {version}, this build reads {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let model: ReFilterConfig = unjson(&r.str()?, "model config")?;
    let train: TrainConfig = unjson(&r.str()?, "train config")?;
    let step = r.u64()? as usize;
    let epoch = r.u64()? as usize;
    let seed = r.u64()?;
    let params = read_params(&mut r)?;

    let config: AdamWConfig = unjson(&r.str()?, "optimizer config")?;
    let total_steps = r.u64()? as usize;
    let opt_step = r.u64()? as usize;
    let n = r.u64()? as usize;
    if n != params.len() {
        return Err(Error::Data(format!("optimizer tracks {n} parameters, checkpoint holds {}", params.len())));
    }
    let mut first_moment = Vec::with_capacity(n);
    let mut second_moment = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u64()? as usize;
        first_moment.push(r.f64s(len)?);
        second_moment.push(r.f64s(len)?);
    }
    let optimizer = OptimizerState { config, total_steps, step: opt_step, first_moment, second_moment };

    let best = match r.u8()? {
        0 => None,
        _ => {
            let dev_metric = r.f64()?;
            let epoch = r.u64()? as usize;
            Some(BestSnapshot { dev_metric, epoch, params: read_params(&mut r)? })
        }
    };
    let log = unjson(&r.str()?, "metrics log")?;
    if r.remaining() != 0 {
        return Err(Error::Data(format!("{}: trailing bytes", path.display())));
    }
    Ok(Checkpoint { model, train, params, optimizer, step, epoch, seed, best, log })
}
