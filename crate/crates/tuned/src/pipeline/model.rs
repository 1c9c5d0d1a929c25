//! The trainable model: per-view feature nets, graph convolutions, evidence
//! heads, the shared consensus extractor, and the fusion configuration,
//! plus full forward/backward orchestration.

use crate::error::{Error, Result};
use crate::evidence::{
    mean_pool, ConsensusExtractor, ConsensusMode, FusionKind, PhiCache, PhiFuser, PsiCache,
    PsiFuser,
};
use crate::fusion::{fuse, smrf_aggregate, FusedEvidence, FusionBackend, FusionGraph};
use crate::graph::{CrossGraph, GcnCache, GcnLayer, TrainGraph};
use crate::nn::{Activation, DenseCache, DenseLayer, SeededRng, Tensor2D};

/// Which Dirichlet parameters the per-view supervised and consistency terms
/// see: consensus-conditioned evidence (default) or the raw head output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaSource {
    Conditioned,
    Raw,
}

impl std::str::FromStr for AlphaSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditioned" => Ok(AlphaSource::Conditioned),
            "raw" => Ok(AlphaSource::Raw),
            other => Err(Error::Config(format!("unknown alpha source '{other}'"))),
        }
    }
}

/// Architecture and fusion hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHyper {
    pub view_dims: Vec<usize>,
    pub classes: usize,
    pub hidden_dim: usize,
    pub gcn_depth: usize,
    pub k_neighbors: usize,
    pub psi: FusionKind,
    pub phi: FusionKind,
    pub backend: FusionBackend,
    pub tau: f64,
    pub alpha_source: AlphaSource,
    pub consensus_mode: ConsensusMode,
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        if self.view_dims.is_empty() {
            return Err(Error::Config("model needs at least one view".to_string()));
        }
        if self.classes < 2 {
            return Err(Error::Config("model needs at least two classes".to_string()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".to_string()));
        }
        if !(1..=2).contains(&self.gcn_depth) {
            return Err(Error::Config(format!(
                "gcn_depth must be 1 or 2, got {}",
                self.gcn_depth
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Per-view network: one feature layer, a short GCN stack, and the
/// evidence head.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewNet {
    pub feature: DenseLayer,
    pub gcn: Vec<GcnLayer>,
    pub head: DenseLayer,
}

/// Everything learnable plus the hyperparameters and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub hyper: ModelHyper,
    pub views: Vec<ViewNet>,
    pub consensus: ConsensusExtractor,
    pub psi: PsiFuser,
    pub phi: PhiFuser,
    pub seed: u64,
    pub epochs_trained: usize,
}

impl ModelBundle {
    pub fn init(hyper: ModelHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = SeededRng::new(seed).derive(0x10);
        let mut views = Vec::with_capacity(hyper.view_dims.len());
        for &d in &hyper.view_dims {
            let feature = DenseLayer::xavier(d, hyper.hidden_dim, Activation::Relu, &mut rng);
            let gcn = (0..hyper.gcn_depth)
                .map(|_| {
                    GcnLayer::xavier(hyper.hidden_dim, hyper.hidden_dim, Activation::Relu, &mut rng)
                })
                .collect();
            let head = DenseLayer::xavier(
                hyper.hidden_dim,
                hyper.classes,
                Activation::Softplus,
                &mut rng,
            );
            views.push(ViewNet { feature, gcn, head });
        }
        let consensus = ConsensusExtractor::xavier(hyper.hidden_dim, hyper.classes, &mut rng);
        let psi = PsiFuser::from_kind(hyper.psi);
        let phi = PhiFuser::from_kind(hyper.phi, hyper.classes);
        Ok(Self {
            hyper,
            views,
            consensus,
            psi,
            phi,
            seed,
            epochs_trained: 0,
        })
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Builds the per-view training graphs for a list of train-split
    /// feature matrices.
    pub fn build_graphs(&self, train_inputs: &[Tensor2D]) -> Result<Vec<TrainGraph>> {
        train_inputs
            .iter()
            .map(|x| TrainGraph::build(x, self.hyper.k_neighbors))
            .collect()
    }

    /// All parameter slices in canonical order. The same order is used by
    /// gradient flattening and by model serialization.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut slices: Vec<&mut [f64]> = Vec::new();
        for view in &mut self.views {
            slices.push(view.feature.weights.data_mut());
            slices.push(&mut view.feature.bias);
            for layer in &mut view.gcn {
                slices.push(layer.weights.data_mut());
            }
            slices.push(view.head.weights.data_mut());
            slices.push(&mut view.head.bias);
        }
        slices.push(self.consensus.layer.weights.data_mut());
        slices.push(&mut self.consensus.layer.bias);
        if let PsiFuser::LinearWeighted { lambda } = &mut self.psi {
            slices.push(&mut lambda[..]);
        }
        match &mut self.phi {
            PhiFuser::LinearWeighted { lambda } => slices.push(&mut lambda[..]),
            PhiFuser::CrossAttention { wq, wk, wv } => {
                slices.push(wq.data_mut());
                slices.push(wk.data_mut());
                slices.push(wv.data_mut());
            }
            PhiFuser::Summation => {}
        }
        slices
    }

    /// Flattens every parameter into one vector (canonical order).
    pub fn params_to_vec(&mut self) -> Vec<f64> {
        self.param_slices_mut()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect()
    }

    /// Writes a flat parameter vector back (canonical order).
    pub fn set_params_from_vec(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            let next = offset + slice.len();
            if next > flat.len() {
                return Err(Error::contract(
                    "set_params_from_vec",
                    "flat vector shorter than parameter count",
                ));
            }
            slice.copy_from_slice(&flat[offset..next]);
            offset = next;
        }
        if offset != flat.len() {
            return Err(Error::contract(
                "set_params_from_vec",
                "flat vector longer than parameter count",
            ));
        }
        Ok(())
    }

    /// Re-projects constrained parameters after an optimizer step.
    pub fn project_constrained_params(&mut self) {
        if let PsiFuser::LinearWeighted { lambda } = &mut self.psi {
            crate::evidence::project_weight_pair(lambda);
        }
        if let PhiFuser::LinearWeighted { lambda } = &mut self.phi {
            crate::evidence::project_weight_pair(lambda);
        }
    }

    pub fn params_are_finite(&self) -> bool {
        let check_dense = |l: &DenseLayer| {
            l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite())
        };
        self.views.iter().all(|v| {
            check_dense(&v.feature)
                && check_dense(&v.head)
                && v.gcn.iter().all(|g| g.weights.is_finite())
        }) && check_dense(&self.consensus.layer)
    }

    /// Training forward pass over the train split, capturing every cache
    /// needed for backprop. Consensus always uses the deterministic mean
    /// realization here so gradients stay exact. When `fixed_graph` is
    /// given and the backend is selective, the fusion graph is not rebuilt
    /// (used by gradient checks to keep the loss differentiable).
    pub fn forward_train(
        &self,
        inputs: &[Tensor2D],
        graphs: &[TrainGraph],
        evidence_clip: f64,
        fixed_graph: Option<&FusionGraph>,
    ) -> Result<TrainTrace> {
        let v = self.num_views();
        if inputs.len() != v || graphs.len() != v {
            return Err(Error::contract(
                "forward_train",
                format!(
                    "expected {v} views, got {} inputs and {} graphs",
                    inputs.len(),
                    graphs.len()
                ),
            ));
        }
        let mut h = Vec::with_capacity(v);
        let mut f_caches = Vec::with_capacity(v);
        let mut q = Vec::with_capacity(v);
        let mut g_caches = Vec::with_capacity(v);
        let mut fused_repr = Vec::with_capacity(v);
        let mut psi_caches = Vec::with_capacity(v);
        let mut evidence = Vec::with_capacity(v);
        let mut clip_pass = Vec::with_capacity(v);
        let mut head_caches = Vec::with_capacity(v);
        for (view, x) in inputs.iter().enumerate() {
            let net = &self.views[view];
            let graph = &graphs[view];
            let (hv, f_cache) = net.feature.forward(x)?;
            let mut cur = hv.clone();
            let mut layer_caches = Vec::with_capacity(net.gcn.len());
            for layer in &net.gcn {
                let (next, cache) = layer.forward(&graph.norm, &cur)?;
                layer_caches.push(cache);
                cur = next;
            }
            let (fv, psi_cache) = self.psi.fuse(&hv, &cur)?;
            let (ev_raw, head_cache) = net.head.forward(&fv)?;
            let (ev, pass) = clamp_with_mask(&ev_raw, evidence_clip);
            h.push(hv);
            f_caches.push(f_cache);
            q.push(cur);
            g_caches.push(layer_caches);
            fused_repr.push(fv);
            psi_caches.push(psi_cache);
            evidence.push(ev);
            clip_pass.push(pass);
            head_caches.push(head_cache);
        }
        let pooled = mean_pool(&fused_repr)?;
        let (cons_raw, cons_cache) = self.consensus.forward(&pooled)?;
        let (consensus, cons_pass) = clamp_with_mask(&cons_raw, evidence_clip);
        let mut conditioned = Vec::with_capacity(v);
        let mut phi_caches = Vec::with_capacity(v);
        for ev in &evidence {
            let (tilde, cache) = self.phi.condition(&consensus, ev)?;
            conditioned.push(tilde);
            phi_caches.push(cache);
        }
        let fused = match (self.hyper.backend, fixed_graph) {
            (FusionBackend::SMrf, Some(graph)) => {
                let fused = smrf_aggregate(&conditioned, graph)?;
                FusedEvidence {
                    fused,
                    coefficients: graph.view_coefficients(),
                    graph: Some(graph.clone()),
                }
            }
            (backend, _) => fuse(backend, &conditioned, self.hyper.tau)?,
        };
        Ok(TrainTrace {
            h,
            q,
            fused_repr,
            evidence,
            clip_pass,
            consensus,
            cons_pass,
            conditioned,
            fused,
            f_caches,
            g_caches,
            psi_caches,
            head_caches,
            cons_cache,
            phi_caches,
        })
    }

    /// Inference over arbitrary rows. When `cross` is `None`, the rows are
    /// the training rows themselves; otherwise each view's rows attach to
    /// the training graph through the given cross attachments.
    pub fn forward_eval(
        &self,
        eval_inputs: &[Tensor2D],
        train_inputs: &[Tensor2D],
        graphs: &[TrainGraph],
        cross: Option<&[CrossGraph]>,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<EvalOutputs> {
        let v = self.num_views();
        let mut raw_evidence = Vec::with_capacity(v);
        let mut fused_repr = Vec::with_capacity(v);
        for view in 0..v {
            let net = &self.views[view];
            let h_eval = net.feature.infer(&eval_inputs[view])?;
            let q_eval = match cross {
                None => {
                    let mut cur = h_eval.clone();
                    for layer in &net.gcn {
                        cur = layer.infer(&graphs[view].norm, &cur)?;
                    }
                    cur
                }
                Some(cross) => {
                    let mut cur_train = net.feature.infer(&train_inputs[view])?;
                    let mut cur_eval = h_eval.clone();
                    for layer in &net.gcn {
                        let next_eval = layer.infer_cross(&cross[view], &cur_eval, &cur_train)?;
                        cur_train = layer.infer(&graphs[view].norm, &cur_train)?;
                        cur_eval = next_eval;
                    }
                    cur_eval
                }
            };
            let f = self.psi.infer(&h_eval, &q_eval)?;
            let e = net.head.infer(&f)?;
            raw_evidence.push(e);
            fused_repr.push(f);
        }
        let pooled = mean_pool(&fused_repr)?;
        let consensus = match self.hyper.consensus_mode {
            ConsensusMode::Mean => self.consensus.layer.infer(&pooled)?,
            ConsensusMode::Sample => {
                let alpha = self.consensus.alpha(&pooled)?;
                let rng = rng.as_deref_mut().ok_or_else(|| {
                    Error::contract("forward_eval", "sample-mode consensus requires an rng")
                })?;
                crate::evidence::sample_dirichlet_evidence(&alpha, rng)?
            }
        };
        let mut conditioned = Vec::with_capacity(v);
        for e in &raw_evidence {
            conditioned.push(self.phi.infer(&consensus, e)?);
        }
        let fused = fuse(self.hyper.backend, &conditioned, self.hyper.tau)?;
        Ok(EvalOutputs {
            raw_evidence,
            conditioned,
            consensus,
            fused,
        })
    }

    /// Backpropagation through the full training forward pass. Fusion-graph
    /// similarity weights are treated as constants.
    pub fn backprop(
        &self,
        graphs: &[TrainGraph],
        trace: &TrainTrace,
        per_view_alpha_grads: &[Tensor2D],
        fused_alpha_grad: Option<&Tensor2D>,
    ) -> Result<ModelGrads> {
        let v = self.num_views();
        let (n, k) = trace.evidence[0].shape();
        let mut grads = ModelGrads::zeros_like(self);

        // dL/d(conditioned evidence) and dL/d(raw evidence)
        let mut d_tilde: Vec<Tensor2D> = vec![Tensor2D::zeros(n, k); v];
        let mut d_e: Vec<Tensor2D> = vec![Tensor2D::zeros(n, k); v];
        match self.hyper.alpha_source {
            AlphaSource::Conditioned => {
                for (dt, g) in d_tilde.iter_mut().zip(per_view_alpha_grads) {
                    dt.add_assign(g)?;
                }
            }
            AlphaSource::Raw => {
                for (de, g) in d_e.iter_mut().zip(per_view_alpha_grads) {
                    de.add_assign(g)?;
                }
            }
        }
        if let Some(fg) = fused_alpha_grad {
            for (dt, &c) in d_tilde.iter_mut().zip(&trace.fused.coefficients) {
                if c != 0.0 {
                    dt.add_assign(&fg.scale(c))?;
                }
            }
        }

        // conditioning backward: accumulate into raw evidence and consensus
        let mut d_cons = Tensor2D::zeros(n, k);
        for view in 0..v {
            let phi_grads = self.phi.backward(&trace.phi_caches[view], &d_tilde[view])?;
            d_e[view].add_assign(&phi_grads.view)?;
            d_cons.add_assign(&phi_grads.cons)?;
            if let Some(dl) = phi_grads.lambda {
                let acc = grads.phi_lambda.get_or_insert([0.0; 2]);
                acc[0] += dl[0];
                acc[1] += dl[1];
            }
            if let Some(dwq) = phi_grads.wq {
                grads
                    .phi_wq
                    .get_or_insert_with(|| Tensor2D::zeros(k, k))
                    .add_assign(&dwq)?;
            }
            if let Some(dwk) = phi_grads.wk {
                grads
                    .phi_wk
                    .get_or_insert_with(|| Tensor2D::zeros(k, k))
                    .add_assign(&dwk)?;
            }
            if let Some(dwv) = phi_grads.wv {
                grads
                    .phi_wv
                    .get_or_insert_with(|| Tensor2D::zeros(k, k))
                    .add_assign(&dwv)?;
            }
        }

        // consensus backward through the clip mask and the shared layer
        apply_mask(&mut d_cons, &trace.cons_pass);
        let cons_grads = self.consensus.layer.backward(&trace.cons_cache, &d_cons)?;
        grads.consensus_w = cons_grads.weights;
        grads.consensus_b = cons_grads.bias;
        // pooled input was the mean over views of the fused representations
        let d_pooled = cons_grads.input.scale(1.0 / v as f64);

        for view in 0..v {
            apply_mask(&mut d_e[view], &trace.clip_pass[view]);
            let head_grads = self.views[view]
                .head
                .backward(&trace.head_caches[view], &d_e[view])?;
            let mut d_fused_repr = head_grads.input;
            d_fused_repr.add_assign(&d_pooled)?;
            grads.views[view].head_w = head_grads.weights;
            grads.views[view].head_b = head_grads.bias;

            let psi_grads = self.psi.backward(&trace.psi_caches[view], &d_fused_repr)?;
            if let Some(dl) = psi_grads.lambda {
                let acc = grads.psi_lambda.get_or_insert([0.0; 2]);
                acc[0] += dl[0];
                acc[1] += dl[1];
            }
            let mut d_h = psi_grads.h;
            let mut d_cur = psi_grads.q;
            for (layer, cache) in self.views[view]
                .gcn
                .iter()
                .zip(&trace.g_caches[view])
                .rev()
            {
                let g = layer.backward(&graphs[view].norm, cache, &d_cur)?;
                grads.views[view].gcn_w.push(g.weights);
                d_cur = g.features;
            }
            grads.views[view].gcn_w.reverse();
            d_h.add_assign(&d_cur)?;

            let f_grads = self.views[view]
                .feature
                .backward(&trace.f_caches[view], &d_h)?;
            grads.views[view].feature_w = f_grads.weights;
            grads.views[view].feature_b = f_grads.bias;
        }
        Ok(grads)
    }
}

fn clamp_with_mask(values: &Tensor2D, cap: f64) -> (Tensor2D, Vec<bool>) {
    let mut out = values.clone();
    let mut pass = vec![true; values.data().len()];
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        if *x > cap {
            *x = cap;
            pass[i] = false;
        }
    }
    (out, pass)
}

fn apply_mask(grad: &mut Tensor2D, pass: &[bool]) {
    for (g, &p) in grad.data_mut().iter_mut().zip(pass) {
        if !p {
            *g = 0.0;
        }
    }
}

/// Intermediates of one training forward pass.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub h: Vec<Tensor2D>,
    pub q: Vec<Tensor2D>,
    pub fused_repr: Vec<Tensor2D>,
    pub evidence: Vec<Tensor2D>,
    pub clip_pass: Vec<Vec<bool>>,
    pub consensus: Tensor2D,
    pub cons_pass: Vec<bool>,
    pub conditioned: Vec<Tensor2D>,
    pub fused: FusedEvidence,
    f_caches: Vec<DenseCache>,
    g_caches: Vec<Vec<GcnCache>>,
    psi_caches: Vec<PsiCache>,
    head_caches: Vec<DenseCache>,
    cons_cache: DenseCache,
    phi_caches: Vec<PhiCache>,
}

impl TrainTrace {
    /// Dirichlet parameters for the per-view supervised terms.
    pub fn per_view_alpha(&self, source: AlphaSource) -> Vec<Tensor2D> {
        let base = match source {
            AlphaSource::Conditioned => &self.conditioned,
            AlphaSource::Raw => &self.evidence,
        };
        base.iter().map(|e| e.map(|x| x + 1.0)).collect()
    }

    pub fn fused_alpha(&self) -> Tensor2D {
        self.fused.fused.map(|x| x + 1.0)
    }
}

/// Inference outputs for a batch of rows.
#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub raw_evidence: Vec<Tensor2D>,
    pub conditioned: Vec<Tensor2D>,
    pub consensus: Tensor2D,
    pub fused: FusedEvidence,
}

impl EvalOutputs {
    pub fn fused_alpha(&self) -> Tensor2D {
        self.fused.fused.map(|x| x + 1.0)
    }
}

/// Per-view parameter gradients in the same layout as `ViewNet`.
#[derive(Debug, Clone)]
pub struct ViewGrads {
    pub feature_w: Tensor2D,
    pub feature_b: Vec<f64>,
    pub gcn_w: Vec<Tensor2D>,
    pub head_w: Tensor2D,
    pub head_b: Vec<f64>,
}

/// Gradients for every parameter of the bundle, flattened in the same
/// canonical order as `ModelBundle::param_slices_mut`.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub views: Vec<ViewGrads>,
    pub consensus_w: Tensor2D,
    pub consensus_b: Vec<f64>,
    pub psi_lambda: Option<[f64; 2]>,
    pub phi_lambda: Option<[f64; 2]>,
    pub phi_wq: Option<Tensor2D>,
    pub phi_wk: Option<Tensor2D>,
    pub phi_wv: Option<Tensor2D>,
}

impl ModelGrads {
    pub fn zeros_like(model: &ModelBundle) -> Self {
        let views = model
            .views
            .iter()
            .map(|_| ViewGrads {
                feature_w: Tensor2D::zeros(0, 0),
                feature_b: Vec::new(),
                gcn_w: Vec::new(),
                head_w: Tensor2D::zeros(0, 0),
                head_b: Vec::new(),
            })
            .collect();
        Self {
            views,
            consensus_w: Tensor2D::zeros(0, 0),
            consensus_b: Vec::new(),
            psi_lambda: match model.psi {
                PsiFuser::LinearWeighted { .. } => Some([0.0; 2]),
                _ => None,
            },
            phi_lambda: match model.phi {
                PhiFuser::LinearWeighted { .. } => Some([0.0; 2]),
                _ => None,
            },
            phi_wq: None,
            phi_wk: None,
            phi_wv: None,
        }
    }

    /// Gradient slices in canonical parameter order.
    pub fn flat_slices(&self) -> Vec<&[f64]> {
        let mut slices: Vec<&[f64]> = Vec::new();
        for view in &self.views {
            slices.push(view.feature_w.data());
            slices.push(&view.feature_b);
            for g in &view.gcn_w {
                slices.push(g.data());
            }
            slices.push(view.head_w.data());
            slices.push(&view.head_b);
        }
        slices.push(self.consensus_w.data());
        slices.push(&self.consensus_b);
        if let Some(l) = &self.psi_lambda {
            slices.push(&l[..]);
        }
        if let Some(l) = &self.phi_lambda {
            slices.push(&l[..]);
        }
        if let Some(w) = &self.phi_wq {
            slices.push(w.data());
        }
        if let Some(w) = &self.phi_wk {
            slices.push(w.data());
        }
        if let Some(w) = &self.phi_wv {
            slices.push(w.data());
        }
        slices
    }

    pub fn to_flat_vec(&self) -> Vec<f64> {
        self.flat_slices()
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect()
    }
}

/// Argmax class per row; ties resolve to the lowest index.
pub fn argmax_rows(scores: &Tensor2D) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
