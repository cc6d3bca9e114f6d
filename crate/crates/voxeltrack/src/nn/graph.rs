//! The trainable model (pillar encoder + FGN) and the Siamese training
//! graph: two shared-weight branches, cross-correlation, weighted BCE.
//! Backward accumulates exact gradients for every parameter across both
//! branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Blob;
use super::conv::{fgn_backward, fgn_forward, Fgn, FgnCache, FgnConfig};
use super::correlate::{cross_correlate, cross_correlate_backward};
use super::loss::weighted_bce;
use super::Tensor;
use crate::error::{Error, Result};
use crate::pillars::{
    encode_backward, encode_pillars, EncodeCache, PillarEncoder, Pillars,
    POINT_FEATURES,
};

#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: PillarEncoder,
    pub fgn: Fgn,
}

impl Model {
    /// Deterministic init: encoder first, then the FGN, from one seed.
    pub fn init(in_channels: usize, fgn_cfg: &FgnConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = PillarEncoder::init_with(in_channels, &mut rng)?;
        let fgn = Fgn::init(in_channels, fgn_cfg, &mut rng)?;
        Ok(Model { encoder, fgn })
    }

    /// Named parameter tensors in a fixed order (shared by gradients,
    /// Adam state and checkpoint blobs).
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["encoder.weight".to_string(), "encoder.bias".to_string()];
        for i in 0..self.fgn.layers.len() {
            names.push(format!("fgn.{i}.weight"));
            names.push(format!("fgn.{i}.bias"));
        }
        names
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.encoder.weight.data(), &self.encoder.bias];
        for l in &self.fgn.layers {
            out.push(l.weight.data());
            out.push(&l.bias);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            vec![self.encoder.weight.data_mut(), &mut self.encoder.bias];
        for l in &mut self.fgn.layers {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias);
        }
        out
    }

    pub fn param_dims(&self) -> Vec<Vec<usize>> {
        let mut out = vec![
            self.encoder.weight.shape().to_vec(),
            vec![self.encoder.bias.len()],
        ];
        for l in &self.fgn.layers {
            out.push(l.weight.shape().to_vec());
            out.push(vec![l.bias.len()]);
        }
        out
    }

    pub fn to_blobs(&self) -> Vec<Blob> {
        self.param_names()
            .into_iter()
            .zip(self.param_dims())
            .zip(self.param_slices())
            .map(|((name, dims), values)| Blob {
                name,
                dims,
                values: values.to_vec(),
            })
            .collect()
    }

    /// Rebuild a model from checkpoint blobs. The architecture (layer
    /// count, strides) comes from the configs; blob dims must agree.
    pub fn from_blobs(
        blobs: &[Blob],
        in_channels: usize,
        fgn_cfg: &FgnConfig,
    ) -> Result<Self> {
        let mut model = Model::init(in_channels, fgn_cfg, 0)?;
        let names = model.param_names();
        let dims = model.param_dims();
        for ((name, want_dims), slot) in
            names.iter().zip(dims.iter()).zip(model.param_slices_mut())
        {
            let blob = blobs
                .iter()
                .find(|b| &b.name == name)
                .ok_or_else(|| Error::config(format!("checkpoint missing blob `{name}`")))?;
            if &blob.dims != want_dims {
                return Err(Error::config(format!(
                    "blob `{name}` dims {:?}, model expects {:?}",
                    blob.dims, want_dims
                )));
            }
            slot.copy_from_slice(&blob.values);
        }
        Ok(model)
    }
}

/// Gradient accumulator shaped exactly like the model's parameter list.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        ModelGrads {
            tensors: model.param_slices().iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }

    fn add_encoder(&mut self, gw: &Tensor, gb: &[f64]) {
        for (a, b) in self.tensors[0].iter_mut().zip(gw.data()) {
            *a += b;
        }
        for (a, b) in self.tensors[1].iter_mut().zip(gb) {
            *a += b;
        }
    }

    fn add_fgn(&mut self, layer: usize, gw: &Tensor, gb: &[f64]) {
        let base = 2 + layer * 2;
        for (a, b) in self.tensors[base].iter_mut().zip(gw.data()) {
            *a += b;
        }
        for (a, b) in self.tensors[base + 1].iter_mut().zip(gb) {
            *a += b;
        }
    }
}

struct BranchCache {
    enc: EncodeCache,
    fgn: FgnCache,
    feat: Tensor,
}

struct ForwardCache {
    target: BranchCache,
    search: BranchCache,
    grad_score: Tensor,
}

/// Runs the two branches and the loss, retaining everything needed for an
/// exact reverse pass.
pub struct SiamGraph {
    cache: Option<ForwardCache>,
    pub score: Option<Tensor>,
}

impl SiamGraph {
    pub fn new() -> Self {
        SiamGraph {
            cache: None,
            score: None,
        }
    }

    fn branch(model: &Model, pillars: &Pillars) -> Result<BranchCache> {
        let (img, enc) = encode_pillars(pillars, &model.encoder)?;
        let (feat, fgn) = fgn_forward(&img, &model.fgn)?;
        Ok(BranchCache { enc, fgn, feat })
    }

    /// Forward through both branches; the score map must end up at least
    /// 1x1 (i.e. the search features at least as large as the target's).
    pub fn forward(
        &mut self,
        model: &Model,
        target: &Pillars,
        search: &Pillars,
        labels: &Tensor,
        weights: &Tensor,
    ) -> Result<f64> {
        let t = Self::branch(model, target)?;
        let s = Self::branch(model, search)?;
        let score = cross_correlate(&s.feat, &t.feat).map_err(|e| {
            Error::shape(format!(
                "score map would be empty: {e} (search feat {:?}, target feat {:?})",
                s.feat.shape(),
                t.feat.shape()
            ))
        })?;
        let (loss, grad_score) = weighted_bce(&score, labels, weights)?;
        self.score = Some(score);
        self.cache = Some(ForwardCache {
            target: t,
            search: s,
            grad_score,
        });
        Ok(loss)
    }

    /// Reverse pass for the most recent forward. Consumes the cache, so a
    /// second call without a new forward fails.
    pub fn backward(&mut self, model: &Model) -> Result<ModelGrads> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Runtime("backward called before forward".into()))?;
        let mut grads = ModelGrads::zeros_like(model);
        let (g_search_feat, g_target_feat) = cross_correlate_backward(
            &cache.search.feat,
            &cache.target.feat,
            &cache.grad_score,
        )?;
        for (branch, g_feat) in [
            (&cache.search, g_search_feat),
            (&cache.target, g_target_feat),
        ] {
            let (g_img, layer_grads) = fgn_backward(&model.fgn, &branch.fgn, &g_feat)?;
            for (i, (gw, gb)) in layer_grads.iter().enumerate() {
                grads.add_fgn(i, gw, gb);
            }
            let (gw, gb) = encode_backward(&branch.enc, &model.encoder, &g_img)?;
            grads.add_encoder(&gw, &gb);
        }
        Ok(grads)
    }
}

impl Default for SiamGraph {
    fn default() -> Self {
        Self::new()
    }
}

/// Smallest distance, across both branches, from any ReLU pre-activation
/// or pillar max-pool runner-up to its switching point.
///
/// The loss is smooth as long as no activation pattern flips, so a
/// finite-difference gradient check is only meaningful when its step
/// (times the worst parameter-to-activation sensitivity) stays below
/// this margin. Checking the margin first turns a would-be flaky
/// gradient mismatch into an explicit fixture failure.
pub fn kink_margin(model: &Model, target: &Pillars, search: &Pillars) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for pillars in [target, search] {
        let (img, enc) = encode_pillars(pillars, &model.encoder)?;
        let c = model.encoder.channels();
        let w = model.encoder.weight.data();
        for pc in &enc.per_pillar {
            for ch in 0..c {
                let wrow = &w[ch * POINT_FEATURES..(ch + 1) * POINT_FEATURES];
                let pres: Vec<f64> = pc
                    .feats
                    .iter()
                    .map(|f| {
                        let mut z = model.encoder.bias[ch];
                        for k in 0..POINT_FEATURES {
                            z += wrow[k] * f[k];
                        }
                        z
                    })
                    .collect();
                let winner_pre = pc.pre[ch];
                if winner_pre > 0.0 {
                    // Winner's ReLU switch, then the pool gap to the best
                    // of the other (rectified) activations.
                    margin = margin.min(winner_pre);
                    let runner_up = pres
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != pc.argmax[ch])
                        .map(|(_, &z)| z.max(0.0))
                        .fold(f64::NEG_INFINITY, f64::max);
                    if runner_up.is_finite() {
                        margin = margin.min(winner_pre - runner_up);
                    }
                } else {
                    // Whole pillar channel inactive; it stays inactive as
                    // long as every pre-activation stays negative.
                    let top = pres.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    margin = margin.min(-top);
                }
            }
        }
        let (_, fgn_cache) = fgn_forward(&img, &model.fgn)?;
        for pre in &fgn_cache.pres {
            for &z in pre.data() {
                margin = margin.min(z.abs());
            }
        }
    }
    Ok(margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GridSpec;
    use crate::pillars::{voxelize, PillarConfig, PointCloud};
    use rand::{Rng, SeedableRng};

    fn tiny_setup() -> (Model, Pillars, Pillars, Tensor, Tensor) {
        // Model seed picked for a large kink margin; see the gradient
        // check below for why that matters.
        setup_with_seed(8)
    }

    fn setup_with_seed(model_seed: u64) -> (Model, Pillars, Pillars, Tensor, Tensor) {
        let grid = GridSpec {
            x_min: 0.0,
            x_max: 16.0,
            y_min: 0.0,
            y_max: 16.0,
            z_min: -2.0,
            z_max: 2.0,
            pillar_size: 1.0,
        };
        let cfg = PillarConfig {
            max_points_per_pillar: 8,
            max_pillars: 1000,
            feature_channels: 3,
        };
        let fgn_cfg = FgnConfig {
            blocks: 1,
            layers_per_block: 2,
            channels: 4,
            first_stride: 1,
        };
        let model = Model::init(cfg.feature_channels, &fgn_cfg, model_seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // One point per cell plus strays: a dense occupancy, so no conv
        // window sees only empty cells. Biases start at zero, so an
        // all-empty window would put a pre-activation exactly on the ReLU
        // switch, which the gradient check below cannot tolerate.
        let mut cloud = |side: usize, extra: usize| {
            let mut pts = Vec::new();
            for r in 0..side {
                for c in 0..side {
                    pts.push([
                        c as f64 + rng.gen_range(0.05..0.95),
                        r as f64 + rng.gen_range(0.05..0.95),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(0.0..1.0),
                    ]);
                }
            }
            for _ in 0..extra {
                pts.push([
                    rng.gen_range(0.1..side as f64 - 0.1),
                    rng.gen_range(0.1..side as f64 - 0.1),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]);
            }
            PointCloud::new(pts)
        };
        // Search covers the full 16x16 grid; target a 7x7 corner grid.
        let search = voxelize(&cloud(16, 60), &grid, &cfg).unwrap();
        let tgrid = GridSpec {
            x_max: 7.0,
            y_max: 7.0,
            ..grid
        };
        let target = voxelize(&cloud(7, 15), &tgrid, &cfg).unwrap();
        // Score map: (16-7+1) - 2 conv layers shaving 2 each = 12-4 = ...
        // forward shapes: search feat 12x12, target feat 3x3, score 10x10.
        let mut rng2 = ChaCha8Rng::seed_from_u64(8);
        let labels = Tensor::from_shape_vec(
            &[10, 10],
            (0..100)
                .map(|_| if rng2.gen_bool(0.1) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let weights =
            Tensor::from_shape_vec(&[10, 10], (0..100).map(|_| rng2.gen_range(0.2..2.0)).collect())
                .unwrap();
        (model, target, search, labels, weights)
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let (model, ..) = tiny_setup();
        let mut graph = SiamGraph::new();
        let err = graph.backward(&model).unwrap_err();
        assert!(err.to_string().contains("before forward"), "{err}");
    }

    #[test]
    fn sampled_parameters_match_finite_differences() {
        let (mut model, target, search, labels, weights) = tiny_setup();
        // The loss is piecewise smooth; a central difference only equals
        // the analytic gradient while no ReLU or max-pool decision flips
        // inside the probed interval. The pinned fixture keeps every
        // switching point at least 3e-3 away, and a 1e-6 step moves any
        // pre-activation by well under 1e-4 (parameter-to-activation
        // sensitivities here are a few tens at most), so every probe
        // below is smooth. Guard the margin first: if an init change
        // erodes it, fail with a clear message rather than a baffling
        // gradient mismatch.
        let margin = kink_margin(&model, &target, &search).unwrap();
        assert!(margin > 3e-3, "fixture kink margin {margin:.2e} too small");
        const H: f64 = 1e-6;
        let mut graph = SiamGraph::new();
        let loss0 = graph
            .forward(&model, &target, &search, &labels, &weights)
            .unwrap();
        assert!(loss0.is_finite());
        let grads = graph.backward(&model).unwrap();

        // Spot-check parameters spread across every tensor; the full
        // sweep lives in the acceptance suite.
        for ti in 0..grads.tensors.len() {
            let len = grads.tensors[ti].len();
            for k in 0..8usize {
                let pi = (k * len / 8 + k) % len;
                let orig = model.param_slices()[ti][pi];
                model.param_slices_mut()[ti][pi] = orig + H;
                let up = SiamGraph::new()
                    .forward(&model, &target, &search, &labels, &weights)
                    .unwrap();
                model.param_slices_mut()[ti][pi] = orig - H;
                let dn = SiamGraph::new()
                    .forward(&model, &target, &search, &labels, &weights)
                    .unwrap();
                model.param_slices_mut()[ti][pi] = orig;
                let fd = (up - dn) / (2.0 * H);
                let an = grads.tensors[ti][pi];
                assert!(
                    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-3,
                    "tensor {ti} param {pi}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn target_larger_than_search_is_rejected() {
        let (model, target, search, labels, weights) = tiny_setup();
        let mut graph = SiamGraph::new();
        // Swap roles: correlating the big map over the small one fails.
        let err = graph
            .forward(&model, &search, &target, &labels, &weights)
            .unwrap_err();
        assert!(err.to_string().contains("score map would be empty"), "{err}");
    }

    #[test]
    fn blobs_round_trip_through_model() {
        let (model, ..) = tiny_setup();
        let blobs = model.to_blobs();
        assert_eq!(blobs.len(), 2 + 2 * model.fgn.layers.len());
        let fgn_cfg = FgnConfig {
            blocks: 1,
            layers_per_block: 2,
            channels: 4,
            first_stride: 1,
        };
        let back = Model::from_blobs(&blobs, 3, &fgn_cfg).unwrap();
        for (a, b) in model.param_slices().iter().zip(back.param_slices()) {
            assert_eq!(*a, b);
        }
    }
}
