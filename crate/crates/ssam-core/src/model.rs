//! Masked-patch pretraining model.
//!
//! Flattened spectrogram patches are linearly embedded, a learnable mask
//! token replaces a random half of them, a cls token is prepended, fixed
//! sinusoidal positions are added, and the sequence runs through a stack of
//! gated scan blocks with a final RMS norm. A two-layer MLP head
//! (`Linear -> GELU -> Linear`) reconstructs the patches and the objective is
//! the mean squared error against the original patches — over all patches by
//! default, with a masked-only switch.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::audio::PatchGrid;
use crate::autodiff::{Tape, Var};
use crate::block::{self, MambaBlockConfig, RMS_EPS};
use crate::error::{Result, SsamError};
use crate::params::{BoundParams, ParamMap};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mamba,
    Vim,
}

fn default_bins() -> usize {
    80
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model width (192 / 384 / 768 for the named configurations).
    pub d_m: usize,
    /// Number of stacked blocks.
    pub depth: usize,
    pub block: MambaBlockConfig,
    pub patch_t: usize,
    pub patch_f: usize,
    /// Spectrogram frames per training example (200 for 2-second clips).
    pub input_frames: usize,
    /// Spectrogram frequency bins; 80 for the audio frontend.
    #[serde(default = "default_bins")]
    pub input_bins: usize,
    pub mask_ratio: f64,
    pub variant: Variant,
    /// Compute the reconstruction loss only over masked patches.
    #[serde(default)]
    pub loss_masked_only: bool,
}

impl ModelConfig {
    fn named(d_m: usize, patch: (usize, usize)) -> Self {
        Self {
            d_m,
            depth: 12,
            block: MambaBlockConfig::new(d_m),
            patch_t: patch.0,
            patch_f: patch.1,
            input_frames: 200,
            input_bins: 80,
            mask_ratio: 0.5,
            variant: Variant::Mamba,
            loss_masked_only: false,
        }
    }

    pub fn tiny() -> Self {
        Self::named(192, (4, 16))
    }

    pub fn small() -> Self {
        Self::named(384, (4, 16))
    }

    pub fn base() -> Self {
        Self::named(768, (4, 16))
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            other => Err(SsamError::Param(format!(
                "unknown preset '{other}' (expected tiny, small or base)"
            ))),
        }
    }

    pub fn grid_t(&self) -> usize {
        self.input_frames / self.patch_t
    }

    pub fn grid_f(&self) -> usize {
        self.input_bins / self.patch_f
    }

    pub fn n_patches(&self) -> usize {
        self.grid_t() * self.grid_f()
    }

    pub fn patch_elems(&self) -> usize {
        self.patch_t * self.patch_f
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.block.d_m != self.d_m {
            return Err(SsamError::Param(format!(
                "block width {} != model width {}",
                self.block.d_m, self.d_m
            )));
        }
        if self.d_m % 2 != 0 {
            return Err(SsamError::Param(
                "d_m must be even for sinusoidal positions".into(),
            ));
        }
        if self.depth == 0 {
            return Err(SsamError::Param("depth must be >= 1".into()));
        }
        if self.patch_t == 0
            || self.patch_f == 0
            || self.input_frames % self.patch_t != 0
            || self.input_bins % self.patch_f != 0
        {
            return Err(SsamError::Geometry(format!(
                "[{}, {}] is not tiled by ({}, {})",
                self.input_frames, self.input_bins, self.patch_t, self.patch_f
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(SsamError::Param(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        let bidirectional = matches!(self.variant, Variant::Vim);
        if self.block.bidirectional != bidirectional {
            return Err(SsamError::Param(format!(
                "variant {:?} inconsistent with block.bidirectional = {}",
                self.variant, self.block.bidirectional
            )));
        }
        Ok(())
    }
}

/// The set of masked patch indices for one example. The cls token is
/// prepended after masking, so it can never be masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Sorted, unique patch indices in `[0, n_patches)`.
    pub masked: Vec<usize>,
    /// Seed of the generator that produced the plan (provenance only).
    pub seed: u64,
}

impl MaskPlan {
    pub fn empty() -> Self {
        Self {
            masked: Vec::new(),
            seed: 0,
        }
    }
}

/// Draw exactly `floor(mask_ratio * n_patches)` distinct patch indices
/// uniformly without replacement.
pub fn build_mask_plan(rng: &mut Rng, n_patches: usize, mask_ratio: f64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(SsamError::Param(format!(
            "mask_ratio must lie in [0, 1), got {mask_ratio}"
        )));
    }
    let k = (mask_ratio * n_patches as f64).floor() as usize;
    Ok(MaskPlan {
        masked: rng.sample_without_replacement(n_patches, k),
        seed: rng.seed(),
    })
}

/// Interleaved sin/cos table with geometric wavelengths from `2*pi` to
/// `10000 * 2*pi`; row 0 (all `sin(0), cos(0) = 0, 1`) is assigned to the
/// cls token and patches occupy rows `1..=n_patches`.
pub fn sinusoidal_positions<F: Scalar>(n_positions: usize, d_m: usize) -> Result<Tensor<F>> {
    if d_m % 2 != 0 {
        return Err(SsamError::Param(format!(
            "sinusoidal positions require even width, got {d_m}"
        )));
    }
    let mut table = Tensor::zeros([n_positions, d_m]);
    for pos in 0..n_positions {
        for i in 0..d_m / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_m as f64);
            let angle = pos as f64 * freq;
            table.data_mut()[pos * d_m + 2 * i] = F::of_f64(angle.sin());
            table.data_mut()[pos * d_m + 2 * i + 1] = F::of_f64(angle.cos());
        }
    }
    Ok(table)
}

/// All trainable tensors plus the fixed (non-trainable) positional table.
#[derive(Debug, Clone)]
pub struct ModelWeights<F> {
    pub params: ParamMap<F>,
    pub e_pos: Tensor<F>,
}

impl<F: Scalar> ModelWeights<F> {
    pub fn cast<G: Scalar>(&self) -> ModelWeights<G> {
        ModelWeights {
            params: self.params.cast(),
            e_pos: self.e_pos.cast(),
        }
    }
}

/// Initialize all weights for `cfg` from the given generator.
pub fn init_model_weights<F: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelWeights<F>> {
    cfg.validate()?;
    let elems = cfg.patch_elems();
    let mut params = ParamMap::new();

    let embed_bound = 1.0 / (elems as f64).sqrt();
    params.insert(
        "patch_embed.weight",
        rng.sample_uniform([elems, cfg.d_m], -embed_bound, embed_bound),
    )?;
    params.insert(
        "patch_embed.bias",
        rng.sample_uniform([cfg.d_m], -embed_bound, embed_bound),
    )?;
    params.insert("cls_token", rng.sample_normal([cfg.d_m], 0.0, 0.02))?;
    params.insert("mask_token", rng.sample_normal([cfg.d_m], 0.0, 0.02))?;

    for i in 0..cfg.depth {
        block::init_block_params(&cfg.block, rng, &mut params, &format!("blocks.{i}."))?;
    }
    params.insert("norm.scale", Tensor::full([cfg.d_m], F::one()))?;

    let h1_bound = 1.0 / (cfg.d_m as f64).sqrt();
    params.insert(
        "head.fc1.weight",
        rng.sample_uniform([cfg.d_m, cfg.d_m], -h1_bound, h1_bound),
    )?;
    params.insert(
        "head.fc1.bias",
        rng.sample_uniform([cfg.d_m], -h1_bound, h1_bound),
    )?;
    params.insert(
        "head.fc2.weight",
        rng.sample_uniform([cfg.d_m, elems], -h1_bound, h1_bound),
    )?;
    params.insert(
        "head.fc2.bias",
        rng.sample_uniform([elems], -h1_bound, h1_bound),
    )?;

    let e_pos = sinusoidal_positions(cfg.n_patches() + 1, cfg.d_m)?;
    Ok(ModelWeights { params, e_pos })
}

fn check_geometry<F: Scalar>(cfg: &ModelConfig, patches: &PatchGrid<F>) -> Result<usize> {
    let (n_p, elems) = patches.patches.dims2()?;
    if elems != cfg.patch_elems() {
        return Err(SsamError::Geometry(format!(
            "patch elements {elems} != configured {}",
            cfg.patch_elems()
        )));
    }
    if patches.patch_t != cfg.patch_t || patches.patch_f != cfg.patch_f {
        return Err(SsamError::Geometry(format!(
            "patch shape ({}, {}) != configured ({}, {})",
            patches.patch_t, patches.patch_f, cfg.patch_t, cfg.patch_f
        )));
    }
    Ok(n_p)
}

/// Variables of interest from one pretraining forward pass.
pub struct PretrainGraph {
    /// Embedded sequence after masking, cls and positions, `[(N_p + 1), d_m]`.
    pub embedded: Var,
    /// Encoder output, `[(N_p + 1), d_m]`.
    pub z: Var,
    /// Reconstructions (cls row dropped), `[N_p, patch_elems]`.
    pub y: Var,
    /// Scalar MSE loss.
    pub loss: Var,
}

/// Embedding + encoder stack, shared by pretraining and plain encoding.
fn encoder_graph<F: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<F>,
    bound: &BoundParams,
    e_pos: &Tensor<F>,
    patches: &PatchGrid<F>,
    plan: &MaskPlan,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let n_p = check_geometry(cfg, patches)?;
    let (pos_rows, pos_cols) = e_pos.dims2()?;
    if pos_rows < n_p + 1 || pos_cols != cfg.d_m {
        return Err(SsamError::Geometry(format!(
            "positional table {:?} too small for {} patches",
            e_pos.shape(),
            n_p
        )));
    }
    if let Some(&worst) = plan.masked.last() {
        if worst >= n_p {
            return Err(SsamError::Geometry(format!(
                "masked index {worst} out of range 0..{n_p}"
            )));
        }
    }

    let x = tape.input(patches.patches.clone());
    let emb = tape.matmul(x, bound.var("patch_embed.weight")?)?;
    let mut emb = tape.add_row(emb, bound.var("patch_embed.bias")?)?;
    if !plan.masked.is_empty() {
        emb = tape.mask_rows(emb, bound.var("mask_token")?, Arc::new(plan.masked.clone()))?;
    }
    let seq = tape.prepend_row(bound.var("cls_token")?, emb)?;
    let pos_slice = Tensor::new(
        [n_p + 1, cfg.d_m],
        e_pos.data()[..(n_p + 1) * cfg.d_m].to_vec(),
    )?;
    let pos = tape.input(pos_slice);
    let embedded = tape.add(seq, pos)?;

    let mut seq = embedded;
    for i in 0..cfg.depth {
        seq = block::block_forward(&cfg.block, tape, bound, &format!("blocks.{i}."), seq)?;
    }
    let z = tape.rms_norm(seq, bound.var("norm.scale")?, F::of_f64(RMS_EPS))?;
    Ok((embedded, z))
}

/// Build the full pretraining graph on an existing tape.
pub fn forward_pretrain_graph<F: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<F>,
    bound: &BoundParams,
    e_pos: &Tensor<F>,
    patches: &PatchGrid<F>,
    plan: &MaskPlan,
) -> Result<PretrainGraph> {
    let (embedded, z) = encoder_graph(cfg, tape, bound, e_pos, patches, plan)?;

    let h = tape.matmul(z, bound.var("head.fc1.weight")?)?;
    let h = tape.add_row(h, bound.var("head.fc1.bias")?)?;
    let h = tape.gelu(h)?;
    let y_all = tape.matmul(h, bound.var("head.fc2.weight")?)?;
    let y_all = tape.add_row(y_all, bound.var("head.fc2.bias")?)?;
    let y = tape.drop_first_row(y_all)?;

    let rows = if cfg.loss_masked_only && !plan.masked.is_empty() {
        Some(Arc::new(plan.masked.clone()))
    } else {
        None
    };
    let loss = tape.mse_vs(y, Arc::new(patches.patches.clone()), rows)?;
    Ok(PretrainGraph {
        embedded,
        z,
        y,
        loss,
    })
}

/// Value-level results of one pretraining forward pass.
#[derive(Debug, Clone)]
pub struct PretrainOutput<F> {
    pub y: Tensor<F>,
    pub z: Tensor<F>,
    pub loss: F,
}

pub fn forward_pretrain<F: Scalar>(
    cfg: &ModelConfig,
    weights: &ModelWeights<F>,
    patches: &PatchGrid<F>,
    plan: &MaskPlan,
) -> Result<PretrainOutput<F>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &weights.params);
    let graph = forward_pretrain_graph(cfg, &mut tape, &bound, &weights.e_pos, patches, plan)?;
    Ok(PretrainOutput {
        y: tape.value(graph.y).clone(),
        z: tape.value(graph.z).clone(),
        loss: tape.value(graph.loss).data()[0],
    })
}

/// Encoder-only forward: no masking, no reconstruction head. Identical to the
/// `z` output of [`forward_pretrain`] with an empty plan.
pub fn encode<F: Scalar>(
    cfg: &ModelConfig,
    weights: &ModelWeights<F>,
    patches: &PatchGrid<F>,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &weights.params);
    let (_, z) = encoder_graph(
        cfg,
        &mut tape,
        &bound,
        &weights.e_pos,
        patches,
        &MaskPlan::empty(),
    )?;
    Ok(tape.value(z).clone())
}

/// A small configuration for fast tests and the smoke-training pipeline.
pub fn toy_config(d_m: usize, depth: usize, input_frames: usize, input_bins: usize) -> ModelConfig {
    let mut block = MambaBlockConfig::new(d_m);
    block.d_state = 8;
    ModelConfig {
        d_m,
        depth,
        block,
        patch_t: 2,
        patch_f: 4,
        input_frames,
        input_bins,
        mask_ratio: 0.5,
        variant: Variant::Mamba,
        loss_masked_only: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{log_mel, patchify, synth};
    use crate::params::grad_check_params;

    fn toy() -> ModelConfig {
        let mut cfg = toy_config(16, 2, 8, 8);
        cfg.block.d_state = 4;
        cfg.block.dt_rank = 1;
        cfg
    }

    fn toy_patches(rng: &mut Rng, cfg: &ModelConfig) -> PatchGrid<f64> {
        PatchGrid {
            patches: rng.sample_uniform([cfg.n_patches(), cfg.patch_elems()], -1.0, 1.0),
            patch_t: cfg.patch_t,
            patch_f: cfg.patch_f,
            grid_t: cfg.grid_t(),
            grid_f: cfg.grid_f(),
        }
    }

    #[test]
    fn sinusoidal_row_zero_alternates() {
        let t: Tensor<f64> = sinusoidal_positions(3, 8).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_positions::<f64>(3, 7).is_err());
    }

    #[test]
    fn sinusoidal_rows_distinct_up_to_1e4() {
        let t: Tensor<f64> = sinusoidal_positions(10_000, 16).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..10_000)
            .map(|r| t.row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        for pair in rows.windows(2) {
            assert_ne!(pair[0], pair[1]);
        }
    }

    #[test]
    fn mask_plan_counts_and_determinism() {
        let mut rng = Rng::new(40, 0);
        let plan = build_mask_plan(&mut rng, 250, 0.5).unwrap();
        assert_eq!(plan.masked.len(), 125);
        assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));

        let empty = build_mask_plan(&mut rng, 250, 0.0).unwrap();
        assert!(empty.masked.is_empty());

        let a = build_mask_plan(&mut Rng::new(9, 9), 100, 0.37).unwrap();
        let b = build_mask_plan(&mut Rng::new(9, 9), 100, 0.37).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masked.len(), 37);
    }

    #[test]
    fn tiny_output_shapes_match_published_geometry() {
        let cfg = ModelConfig::tiny();
        let mut rng = Rng::new(41, 0);
        let weights: ModelWeights<f32> = init_model_weights(&cfg, &mut rng).unwrap();

        let wav = synth::tone(880.0, 2.0, 0.4);
        let spec = log_mel::<f32>(&wav).unwrap();
        let patches = patchify(&spec, 4, 16).unwrap();
        assert_eq!(patches.n_patches(), 250);

        let plan = build_mask_plan(&mut rng, 250, 0.5).unwrap();
        let out = forward_pretrain(&cfg, &weights, &patches, &plan).unwrap();
        assert_eq!(out.y.shape(), &[250, 64]);
        assert_eq!(out.z.shape(), &[251, 192]);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn zero_mask_loss_matches_independent_reevaluation() {
        let cfg = toy();
        let mut rng = Rng::new(42, 0);
        let weights: ModelWeights<f64> = init_model_weights(&cfg, &mut rng).unwrap();
        let patches = toy_patches(&mut rng, &cfg);
        let out = forward_pretrain(&cfg, &weights, &patches, &MaskPlan::empty()).unwrap();

        let mut acc = 0.0;
        for i in 0..out.y.numel() {
            let d = out.y.data()[i] - patches.patches.data()[i];
            acc += d * d;
        }
        let expected = acc / out.y.numel() as f64;
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn masked_positions_carry_mask_token_plus_position() {
        let cfg = toy();
        let mut rng = Rng::new(43, 0);
        let weights: ModelWeights<f64> = init_model_weights(&cfg, &mut rng).unwrap();
        let patches = toy_patches(&mut rng, &cfg);
        let plan = build_mask_plan(&mut rng, cfg.n_patches(), 0.5).unwrap();
        assert!(!plan.masked.is_empty());

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &weights.params);
        let graph =
            forward_pretrain_graph(&cfg, &mut tape, &bound, &weights.e_pos, &patches, &plan)
                .unwrap();
        let embedded = tape.value(graph.embedded);
        let token = weights.params.get("mask_token").unwrap();
        for &idx in &plan.masked {
            let row = embedded.row(idx + 1); // cls occupies row 0
            for j in 0..cfg.d_m {
                let expected = token.data()[j] + weights.e_pos.data()[(idx + 1) * cfg.d_m + j];
                assert_eq!(row[j].to_bits(), expected.to_bits());
            }
        }
    }

    #[test]
    fn encode_equals_pretrain_z_with_empty_plan() {
        let cfg = toy();
        let mut rng = Rng::new(44, 0);
        let weights: ModelWeights<f64> = init_model_weights(&cfg, &mut rng).unwrap();
        let patches = toy_patches(&mut rng, &cfg);
        let z = encode(&cfg, &weights, &patches).unwrap();
        let out = forward_pretrain(&cfg, &weights, &patches, &MaskPlan::empty()).unwrap();
        assert_eq!(
            z.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            out.z.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn permuting_patches_changes_z() {
        let cfg = toy();
        let mut rng = Rng::new(45, 0);
        let weights: ModelWeights<f64> = init_model_weights(&cfg, &mut rng).unwrap();
        let patches = toy_patches(&mut rng, &cfg);
        let z = encode(&cfg, &weights, &patches).unwrap();

        let mut swapped = patches.patches.clone();
        let elems = cfg.patch_elems();
        for j in 0..elems {
            let a = swapped.data()[j];
            swapped.data_mut()[j] = swapped.data()[elems + j];
            swapped.data_mut()[elems + j] = a;
        }
        let permuted = PatchGrid {
            patches: swapped,
            ..patches
        };
        let z2 = encode(&cfg, &weights, &permuted).unwrap();
        assert!(z.max_abs_diff(&z2).unwrap() > 1e-9);
    }

    #[test]
    fn unidirectional_encoder_is_causal_under_truncation() {
        let cfg = toy();
        let mut rng = Rng::new(46, 0);
        let weights: ModelWeights<f64> = init_model_weights(&cfg, &mut rng).unwrap();
        let patches = toy_patches(&mut rng, &cfg);
        let z_full = encode(&cfg, &weights, &patches).unwrap();

        let keep = 5;
        let truncated = PatchGrid {
            patches: Tensor::new(
                [keep, cfg.patch_elems()],
                patches.patches.data()[..keep * cfg.patch_elems()].to_vec(),
            )
            .unwrap(),
            patch_t: cfg.patch_t,
            patch_f: cfg.patch_f,
            grid_t: cfg.grid_t(),
            grid_f: cfg.grid_f(),
        };
        let z_trunc = encode(&cfg, &weights, &truncated).unwrap();
        for row in 0..keep + 1 {
            for j in 0..cfg.d_m {
                assert_eq!(
                    z_full.data()[row * cfg.d_m + j].to_bits(),
                    z_trunc.data()[row * cfg.d_m + j].to_bits(),
                    "row {row}"
                );
            }
        }
    }

    // The encoder itself is a causal scan, so reordering the patch sequence
    // legitimately changes z (covered by `permuting_patches_changes_z`). The
    // relabeling invariance that does hold end to end is in the objective:
    // the MSE reduction treats (prediction row, target row, plan membership)
    // triples symmetrically, so relabeling them consistently cannot change
    // the loss.
    #[test]
    fn loss_reduction_invariant_under_consistent_relabeling() {
        let mut rng = Rng::new(47, 0);
        let n = 12;
        let elems = 6;
        let pred: Tensor<f64> = rng.sample_uniform([n, elems], -1.0, 1.0);
        let target: Tensor<f64> = rng.sample_uniform([n, elems], -1.0, 1.0);
        let masked: Vec<usize> = vec![1, 4, 5, 9];

        let eval = |pred: &Tensor<f64>, target: &Tensor<f64>, rows: &[usize]| -> f64 {
            let mut tape = Tape::new();
            let p = tape.input(pred.clone());
            let loss = tape
                .mse_vs(
                    p,
                    Arc::new(target.clone()),
                    Some(Arc::new(rows.to_vec())),
                )
                .unwrap();
            tape.value(loss).data()[0]
        };
        let base = eval(&pred, &target, &masked);

        let perm: Vec<usize> = (0..n).map(|i| (i + 5) % n).collect();
        let permute_rows = |t: &Tensor<f64>| {
            let mut out = Tensor::zeros([n, elems]);
            for (src, &dst) in perm.iter().enumerate() {
                out.data_mut()[dst * elems..(dst + 1) * elems].copy_from_slice(t.row(src));
            }
            out
        };
        let mut perm_masked: Vec<usize> = masked.iter().map(|&i| perm[i]).collect();
        perm_masked.sort_unstable();
        let relabeled = eval(&permute_rows(&pred), &permute_rows(&target), &perm_masked);
        assert!(
            (relabeled - base).abs() <= 1e-12 * base.abs().max(1.0),
            "{relabeled} vs {base}"
        );
    }

    #[test]
    fn end_to_end_gradients_pass_fd_checks() {
        let cfg = toy();
        let mut rng = Rng::new(48, 0);
        let weights: ModelWeights<f64> = init_model_weights(&cfg, &mut rng).unwrap();
        let patches = toy_patches(&mut rng, &cfg);
        let plan = build_mask_plan(&mut rng, cfg.n_patches(), 0.5).unwrap();

        let results = grad_check_params(&weights.params, 1e-4, |_| true, |tape, bound| {
            let graph =
                forward_pretrain_graph(&cfg, tape, bound, &weights.e_pos, &patches, &plan)?;
            Ok(graph.loss)
        })
        .unwrap();
        assert_eq!(results.len(), weights.params.len());
        for (name, err) in results {
            assert!(err < 1e-4, "{name}: err {err}");
        }
    }

    #[test]
    fn config_json_field_names() {
        let cfg = ModelConfig::tiny();
        let json = serde_json::to_value(&cfg).unwrap();
        for field in [
            "d_m",
            "depth",
            "block",
            "patch_t",
            "patch_f",
            "input_frames",
            "mask_ratio",
            "variant",
        ] {
            assert!(json.get(field).is_some(), "missing field {field}");
        }
        assert_eq!(json["block"]["E"], 3);
        assert_eq!(json["variant"], "mamba");
        let back: ModelConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn model_param_count_matches_formula() {
        let cfg = toy();
        let mut rng = Rng::new(49, 0);
        let weights: ModelWeights<f32> = init_model_weights(&cfg, &mut rng).unwrap();
        let expected =
            block::count_parameters(&cfg.block, cfg.depth, cfg.patch_elems(), cfg.d_m);
        assert_eq!(weights.params.total_elements(), expected);
    }
}
