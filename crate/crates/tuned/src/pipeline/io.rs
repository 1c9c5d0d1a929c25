//! Versioned binary model container.
//!
//! Layout (all integers little-endian):
//! magic `TUNEDv1`, then `views: u32`, `classes: u32`, `hidden: u32`,
//! `gcn_depth: u32`, `k_neighbors: u32`, `tau: f64`, five `u8` tags
//! (psi, phi, backend, alpha source, consensus mode), `seed: u64`,
//! `epochs_trained: u64`, the per-view input dimensions (`u32` each), and
//! finally every parameter tensor in canonical order, each written as
//! `rows: u32, cols: u32` followed by its row-major `f64` payload (biases
//! are `len: u32` plus payload). The file must end exactly after the last
//! parameter.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::evidence::{ConsensusExtractor, ConsensusMode, FusionKind, PhiFuser, PsiFuser};
use crate::fusion::FusionBackend;
use crate::graph::GcnLayer;
use crate::nn::{Activation, DenseLayer, Tensor2D};

use super::model::{AlphaSource, ModelBundle, ModelHyper, ViewNet};

const MAGIC: &[u8; 7] = b"TUNEDv1";

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn tensor(&mut self, t: &Tensor2D) -> Result<()> {
        self.u32(t.rows() as u32)?;
        self.u32(t.cols() as u32)?;
        for &v in t.data() {
            self.f64(v)?;
        }
        Ok(())
    }
    fn vector(&mut self, v: &[f64]) -> Result<()> {
        self.u32(v.len() as u32)?;
        for &x in v {
            self.f64(x)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::CorruptModel("unexpected end of file".to_string()))?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }
    fn tensor(&mut self, expect: Option<(usize, usize)>) -> Result<Tensor2D> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if let Some((er, ec)) = expect {
            if (rows, cols) != (er, ec) {
                return Err(Error::CorruptModel(format!(
                    "tensor shape {rows}x{cols} does not match expected {er}x{ec}"
                )));
            }
        }
        if rows.saturating_mul(cols) > 100_000_000 {
            return Err(Error::CorruptModel(format!(
                "implausible tensor shape {rows}x{cols}"
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Tensor2D::new(rows, cols, data)
            .map_err(|e| Error::CorruptModel(format!("bad tensor payload: {e}")))
    }
    fn vector(&mut self, expect: usize) -> Result<Vec<f64>> {
        let len = self.u32()? as usize;
        if len != expect {
            return Err(Error::CorruptModel(format!(
                "vector length {len} does not match expected {expect}"
            )));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Ok(data)
    }
}

fn kind_tag(kind: FusionKind) -> u8 {
    match kind {
        FusionKind::Summation => 0,
        FusionKind::LinearWeighted => 1,
        FusionKind::CrossAttention => 2,
    }
}

fn kind_from_tag(tag: u8) -> Result<FusionKind> {
    match tag {
        0 => Ok(FusionKind::Summation),
        1 => Ok(FusionKind::LinearWeighted),
        2 => Ok(FusionKind::CrossAttention),
        other => Err(Error::CorruptModel(format!("unknown fusion tag {other}"))),
    }
}

/// Writes the model to disk.
pub fn save_model(model: &ModelBundle, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer {
        inner: std::io::BufWriter::new(file),
    };
    w.inner.write_all(MAGIC)?;
    let h = &model.hyper;
    w.u32(h.view_dims.len() as u32)?;
    w.u32(h.classes as u32)?;
    w.u32(h.hidden_dim as u32)?;
    w.u32(h.gcn_depth as u32)?;
    w.u32(h.k_neighbors as u32)?;
    w.f64(h.tau)?;
    w.u8(kind_tag(h.psi))?;
    w.u8(kind_tag(h.phi))?;
    w.u8(match h.backend {
        FusionBackend::SMrf => 0,
        FusionBackend::Average => 1,
        FusionBackend::Dst => 2,
    })?;
    w.u8(match h.alpha_source {
        AlphaSource::Conditioned => 0,
        AlphaSource::Raw => 1,
    })?;
    w.u8(match h.consensus_mode {
        ConsensusMode::Mean => 0,
        ConsensusMode::Sample => 1,
    })?;
    w.u64(model.seed)?;
    w.u64(model.epochs_trained as u64)?;
    for &d in &h.view_dims {
        w.u32(d as u32)?;
    }
    for view in &model.views {
        w.tensor(&view.feature.weights)?;
        w.vector(&view.feature.bias)?;
        for layer in &view.gcn {
            w.tensor(&layer.weights)?;
        }
        w.tensor(&view.head.weights)?;
        w.vector(&view.head.bias)?;
    }
    w.tensor(&model.consensus.layer.weights)?;
    w.vector(&model.consensus.layer.bias)?;
    if let PsiFuser::LinearWeighted { lambda } = &model.psi {
        w.f64(lambda[0])?;
        w.f64(lambda[1])?;
    }
    match &model.phi {
        PhiFuser::Summation => {}
        PhiFuser::LinearWeighted { lambda } => {
            w.f64(lambda[0])?;
            w.f64(lambda[1])?;
        }
        PhiFuser::CrossAttention { wq, wk, wv } => {
            w.tensor(wq)?;
            w.tensor(wk)?;
            w.tensor(wv)?;
        }
    }
    w.inner.flush()?;
    Ok(())
}

/// Reads a model back; fails with distinct diagnostics for a version
/// mismatch versus a corrupt or truncated file.
pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: std::io::BufReader::new(file),
    };
    let magic = r.bytes::<7>()?;
    if &magic != MAGIC {
        let found = String::from_utf8_lossy(&magic).into_owned();
        if magic.starts_with(b"TUNED") {
            return Err(Error::ModelVersion {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found,
            });
        }
        return Err(Error::CorruptModel(format!(
            "bad magic header {found:?}"
        )));
    }
    let views = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let gcn_depth = r.u32()? as usize;
    let k_neighbors = r.u32()? as usize;
    let tau = r.f64()?;
    let psi_kind = kind_from_tag(r.u8()?)?;
    let phi_kind = kind_from_tag(r.u8()?)?;
    let backend = match r.u8()? {
        0 => FusionBackend::SMrf,
        1 => FusionBackend::Average,
        2 => FusionBackend::Dst,
        other => return Err(Error::CorruptModel(format!("unknown backend tag {other}"))),
    };
    let alpha_source = match r.u8()? {
        0 => AlphaSource::Conditioned,
        1 => AlphaSource::Raw,
        other => {
            return Err(Error::CorruptModel(format!(
                "unknown alpha-source tag {other}"
            )))
        }
    };
    let consensus_mode = match r.u8()? {
        0 => ConsensusMode::Mean,
        1 => ConsensusMode::Sample,
        other => {
            return Err(Error::CorruptModel(format!(
                "unknown consensus-mode tag {other}"
            )))
        }
    };
    let seed = r.u64()?;
    let epochs_trained = r.u64()? as usize;
    let mut view_dims = Vec::with_capacity(views);
    for _ in 0..views {
        view_dims.push(r.u32()? as usize);
    }
    let hyper = ModelHyper {
        view_dims: view_dims.clone(),
        classes,
        hidden_dim: hidden,
        gcn_depth,
        k_neighbors,
        psi: psi_kind,
        phi: phi_kind,
        backend,
        tau,
        alpha_source,
        consensus_mode,
    };
    hyper
        .validate()
        .map_err(|e| Error::CorruptModel(format!("invalid model header: {e}")))?;

    let mut nets = Vec::with_capacity(views);
    for &d in &view_dims {
        let feature = DenseLayer::new(
            r.tensor(Some((d, hidden)))?,
            r.vector(hidden)?,
            Activation::Relu,
        )
        .map_err(|e| Error::CorruptModel(e.to_string()))?;
        let mut gcn = Vec::with_capacity(gcn_depth);
        for _ in 0..gcn_depth {
            gcn.push(GcnLayer {
                weights: r.tensor(Some((hidden, hidden)))?,
                activation: Activation::Relu,
            });
        }
        let head = DenseLayer::new(
            r.tensor(Some((hidden, classes)))?,
            r.vector(classes)?,
            Activation::Softplus,
        )
        .map_err(|e| Error::CorruptModel(e.to_string()))?;
        nets.push(ViewNet { feature, gcn, head });
    }
    let consensus = ConsensusExtractor::new(
        DenseLayer::new(
            r.tensor(Some((hidden, classes)))?,
            r.vector(classes)?,
            Activation::Softplus,
        )
        .map_err(|e| Error::CorruptModel(e.to_string()))?,
    )
    .map_err(|e| Error::CorruptModel(e.to_string()))?;
    let psi = match psi_kind {
        FusionKind::Summation => PsiFuser::Summation,
        FusionKind::LinearWeighted => PsiFuser::LinearWeighted {
            lambda: [r.f64()?, r.f64()?],
        },
        FusionKind::CrossAttention => PsiFuser::CrossAttention,
    };
    let phi = match phi_kind {
        FusionKind::Summation => PhiFuser::Summation,
        FusionKind::LinearWeighted => PhiFuser::LinearWeighted {
            lambda: [r.f64()?, r.f64()?],
        },
        FusionKind::CrossAttention => PhiFuser::CrossAttention {
            wq: r.tensor(Some((classes, classes)))?,
            wk: r.tensor(Some((classes, classes)))?,
            wv: r.tensor(Some((classes, classes)))?,
        },
    };
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::CorruptModel(
            "trailing bytes after the last parameter".to_string(),
        ));
    }
    Ok(ModelBundle {
        hyper,
        views: nets,
        consensus,
        psi,
        phi,
        seed,
        epochs_trained,
    })
}
