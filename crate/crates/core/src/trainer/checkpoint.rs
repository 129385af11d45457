//! Binary checkpoints.
//!
//! Layout: `DEGM`, a u32 version, a u64-prefixed JSON header, then matrix
//! blobs (u64 rows, u64 cols, row-major f64), all little-endian. Blob order:
//! encoder, discriminator, energy head, classifier, optimizer moments per
//! group in the same order, replay buffer, `p̄`, then the stored summaries
//! that are present.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierParams, FeatureEncoder, OptimState, TrainConfig, TrainState};
use crate::contrastive::DiscriminatorParams;
use crate::diff::{Matrix, RngState, RngStream};
use crate::ebm::{EnergyHeadParams, ReplayBuffer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DEGM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    rng: RngState,
    input_dim: usize,
    num_classes: usize,
    num_nodes: usize,
    optimizer_steps: [u64; 4],
    buffer_len: usize,
    has_s_bar: bool,
    has_s_final: bool,
}

fn groups(st: &TrainState) -> [(Vec<&Matrix>, &OptimState); 4] {
    [
        (st.encoder.matrices(), &st.opt_encoder),
        (vec![&st.disc.w], &st.opt_disc),
        (st.energy.matrices(), &st.opt_energy),
        (st.classifier.matrices(), &st.opt_classifier),
    ]
}

fn put(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(st: &TrainState, path: &Path) -> Result<()> {
    let header = Header {
        config: st.config.clone(),
        epoch: st.epoch,
        rng: st.rng.state(),
        input_dim: st.encoder.input_dim(),
        num_classes: st.classifier.num_classes(),
        num_nodes: st.p_bar.len(),
        optimizer_steps: [st.opt_encoder.step, st.opt_disc.step, st.opt_energy.step, st.opt_classifier.step],
        buffer_len: st.buffer.len(),
        has_s_bar: st.s_bar.is_some(),
        has_s_final: st.s_final.is_some(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let gs = groups(st);
    for (ms, _) in &gs {
        for m in ms {
            put(&mut out, m);
        }
    }
    for (_, opt) in &gs {
        for m in opt.m.iter().chain(&opt.v) {
            put(&mut out, m);
        }
    }
    let rows: Vec<f64> = st.buffer.entries().flatten().copied().collect();
    put(&mut out, &Matrix::from_vec(st.buffer.len(), st.buffer.dim(), rows)?);
    put(&mut out, &Matrix::row_vector(&st.p_bar));
    for s in [&st.s_bar, &st.s_final].into_iter().flatten() {
        put(&mut out, &Matrix::row_vector(s));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, want: (usize, usize)) -> Result<Matrix> {
        let shape = (self.u64()? as usize, self.u64()? as usize);
        if shape != want {
            return Err(Error::Format(format!("checkpoint blob is {shape:?}, expected {want:?}")));
        }
        let n = shape.0.checked_mul(shape.1).and_then(|n| n.checked_mul(8));
        let raw = self.take(n.ok_or_else(|| Error::Format("checkpoint blob too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Matrix::from_vec(shape.0, shape.1, data).map_err(|e| Error::Format(e.to_string()))
    }

    fn fill(&mut self, ms: Vec<&mut Matrix>) -> Result<()> {
        for m in ms {
            *m = self.matrix(m.shape())?;
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("not a checkpoint (empty or short file)".into()))? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.u64()? as usize;
    let h: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let cfg = h.config;
    cfg.validate()?;

    // Shapes come from the configuration; values from the blobs.
    let mut scratch = RngStream::new(0);
    let mut encoder = FeatureEncoder::init(&cfg, h.input_dim, &mut scratch);
    let d = encoder.dim();
    let mut disc = DiscriminatorParams::init(d, &mut scratch);
    let mut energy = EnergyHeadParams::init(d, cfg.effective_hidden(), cfg.effective_ce_mode(), cfg.rho, &mut scratch);
    let mut classifier = ClassifierParams::init(d, h.num_classes, &mut scratch);
    r.fill(encoder.matrices_mut())?;
    r.fill(vec![&mut disc.w])?;
    r.fill(energy.matrices_mut())?;
    r.fill(classifier.matrices_mut())?;
    let opt = |ms: Vec<&Matrix>, step: u64| {
        let shapes: Vec<_> = ms.iter().map(|m| m.shape()).collect();
        let mut o = OptimState::new(cfg.optimizer, cfg.lr, cfg.weight_decay, &shapes);
        o.step = step;
        o
    };
    let mut opts = [
        opt(encoder.matrices(), h.optimizer_steps[0]),
        opt(vec![&disc.w], h.optimizer_steps[1]),
        opt(energy.matrices(), h.optimizer_steps[2]),
        opt(classifier.matrices(), h.optimizer_steps[3]),
    ];
    for o in &mut opts {
        r.fill(o.m.iter_mut().chain(o.v.iter_mut()).collect())?;
    }
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, cfg.reuse_prob, d);
    buffer.push(&r.matrix((h.buffer_len, d))?)?;
    let p_bar = r.matrix((1, h.num_nodes))?.into_vec();
    let s_bar = if h.has_s_bar { Some(r.matrix((1, d))?.into_vec()) } else { None };
    let s_final = if h.has_s_final { Some(r.matrix((1, d))?.into_vec()) } else { None };
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let [opt_encoder, opt_disc, opt_energy, opt_classifier] = opts;
    Ok(TrainState {
        rng: RngStream::from_state(&h.rng)?,
        config: cfg,
        encoder,
        disc,
        energy,
        classifier,
        opt_encoder,
        opt_disc,
        opt_energy,
        opt_classifier,
        buffer,
        p_bar,
        s_bar,
        s_final,
        epoch: h.epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphDataset, Splits};
    use crate::trainer::{ood_score, Trainer};

    fn graph() -> GraphDataset {
        let mut rng = RngStream::new(3);
        let n = 10;
        let x = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.normal()).collect()).unwrap();
        let edges = (0..n - 1).map(|i| (i, i + 1)).collect();
        let labels = (0..n).map(|i| Some(i % 2)).collect();
        let splits = Splits {
            train: vec![0, 1, 2, 3],
            valid: vec![4, 5],
            test: vec![6, 7, 8, 9],
            ood: vec![],
        };
        GraphDataset::new(x, edges, labels, 2, splits).unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            dim: 4,
            hops: 2,
            steps: 2,
            energy_hidden: 3,
            dropout: 0.1,
            buffer_capacity: 25,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let g = graph();
        let t = Trainer::new(&g, &config()).unwrap();
        let mut st = t.init_state();
        t.epoch(&mut st).unwrap();
        t.epoch(&mut st).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        save_checkpoint(&st, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, st);
        let nodes: Vec<usize> = (0..10).collect();
        let a = ood_score(&g, &nodes, &st).unwrap();
        let b = ood_score(&g, &nodes, &back).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let g = graph();
        let t = Trainer::new(&g, &config()).unwrap();
        let mut whole = t.init_state();
        t.run(&mut whole, |_, _| Ok(())).unwrap();

        let mut part = t.init_state();
        t.epoch(&mut part).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.bin");
        save_checkpoint(&part, &p).unwrap();
        let mut resumed = load_checkpoint(&p).unwrap();
        t.run(&mut resumed, |_, _| Ok(())).unwrap();
        assert_eq!(resumed, whole);
    }

    #[test]
    fn bad_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.bin");
        fs::write(&p, b"").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));

        let g = graph();
        let t = Trainer::new(&g, &config()).unwrap();
        let st = t.init_state();
        let full = dir.path().join("full.bin");
        save_checkpoint(&st, &full).unwrap();
        let bytes = fs::read(&full).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        fs::write(&p, &wrong).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Format(m)) => assert!(m.contains("version"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
