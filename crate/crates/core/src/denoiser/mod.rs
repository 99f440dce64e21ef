//! The conditioned diffusion transformer: waypoint tokens attended against
//! BEV and context tokens with a timestep embedding, trained by exact
//! reverse-mode differentiation.
//!
//! Conditioning components are individually switchable: the timestep
//! embedding (TSE), cross-attention fusion (CAF), contextual average
//! pooling (CAP), and BEV feature compression (BFC). With CAF off the
//! conditioning tokens are mean-pooled and added to every path token;
//! with BFC off every BEV cell becomes a token.

mod artifact;
mod net;
mod params;
mod train;

pub use artifact::ArtifactError;
pub use params::{param_count, param_layout, LayoutEntry};
pub use train::{train, LossPoint, OptimizerConfig, TrainError};
pub(crate) use train::{train_prepared, PreparedExample};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{DenoiseError, DenoiseModel, Standardizer, TrainingExample};
use crate::proposer::ContextEmbedding;
use crate::scene::{BevGrid, Path, Waypoint};
use net::{
    attn_backward, attn_forward, attn_grads_mut, attn_params, gelu_backward, gelu_forward,
    layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, ln_params,
    wb_grads_mut, AttnCache, LayerNormCache, Mat,
};
use params::{build_offsets, init_params, Offsets};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("artifact error: {0}")]
    Artifact(#[from] ArtifactError),
}

/// Architecture and ablation switches. Parameter count is a pure function
/// of this config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// BEV token grid (rows, cols) after compression.
    pub bev_tokens: [usize; 2],
    /// Channel count of the BEV grids this model conditions on.
    pub bev_channels: usize,
    /// Waypoint count of the paths this model denoises.
    pub horizon: usize,
    pub use_tse: bool,
    pub use_caf: bool,
    pub use_cap: bool,
    pub use_bfc: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            bev_tokens: [8, 8],
            bev_channels: 6,
            horizon: 6,
            use_tse: true,
            use_caf: true,
            use_cap: true,
            use_bfc: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let err = |m: String| Err(DenoiserError::InvalidConfig(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return err(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.bev_tokens[0] == 0 || self.bev_tokens[1] == 0 {
            return err("bev_tokens must be positive".into());
        }
        if self.bev_channels == 0 {
            return err("bev_channels must be positive".into());
        }
        if self.horizon == 0 {
            return err("horizon must be positive".into());
        }
        Ok(())
    }
}

/// Argument of the positional code for waypoint index `j`, offset into a
/// band disjoint from reverse-time values so position and timestep
/// signals stay separable.
fn position_code(j: usize) -> f64 {
    64.0 + 8.0 * j as f64
}

/// Sinusoidal embedding: component `2k` is `sin(t / 10000^(2k/d))` and
/// component `2k+1` the matching cosine.
pub fn embed_timestep(t: f64, d_model: usize) -> Result<Vec<f64>, DenoiserError> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(DenoiserError::InvalidConfig(format!(
            "sinusoidal embedding needs even d_model, got {d_model}"
        )));
    }
    let mut out = vec![0.0; d_model];
    for k in 0..d_model / 2 {
        let freq = (-((2 * k) as f64) / d_model as f64 * 10_000f64.ln()).exp();
        let arg = t * freq;
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    Ok(out)
}

/// Average-pool a BEV grid to `(rows, cols)` cells, keeping channels:
/// the pre-projection half of BEV feature compression. Returns one row of
/// `channels` values per pooled cell, in row-major cell order.
pub fn pool_bev(
    grid: &BevGrid,
    rows: usize,
    cols: usize,
) -> Result<Vec<Vec<f64>>, DenoiserError> {
    if rows == 0 || cols == 0 || grid.height % rows != 0 || grid.width % cols != 0 {
        return Err(DenoiserError::InvalidConfig(format!(
            "pooled shape {rows}x{cols} must divide grid {}x{}",
            grid.height, grid.width
        )));
    }
    let bh = grid.height / rows;
    let bw = grid.width / cols;
    let norm = 1.0 / (bh * bw) as f64;
    let mut cells = vec![vec![0.0; grid.channels]; rows * cols];
    for c in 0..grid.channels {
        for pr in 0..rows {
            for pc in 0..cols {
                let mut acc = 0.0;
                for r in pr * bh..(pr + 1) * bh {
                    for col in pc * bw..(pc + 1) * bw {
                        acc += grid.get(c, r, col);
                    }
                }
                cells[pr * cols + pc][c] = acc * norm;
            }
        }
    }
    Ok(cells)
}

/// Mean-pool the context tokens to a single token when CAP is enabled;
/// otherwise pass the sequence through unchanged.
pub fn pool_context(context: &ContextEmbedding, use_cap: bool) -> Vec<Vec<f64>> {
    if !use_cap || context.tokens.len() <= 1 {
        return context.tokens.clone();
    }
    let d = context.d_model();
    let mut mean = vec![0.0; d];
    for token in &context.tokens {
        for (m, v) in mean.iter_mut().zip(token) {
            *m += v;
        }
    }
    let inv = 1.0 / context.tokens.len() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    vec![mean]
}

/// Both loss terms: waypoint MSE plus the MSE between per-prefix
/// cumulative sums of the predicted and target waypoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub waypoint_mse: f64,
    pub cumsum_mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(waypoint_mse: f64, cumsum_mse: f64) -> Self {
        Self {
            waypoint_mse,
            cumsum_mse,
            total: waypoint_mse + cumsum_mse,
        }
    }
}

/// Pre-pooled conditioning inputs for one example.
#[derive(Debug, Clone)]
pub(crate) struct Conditioning {
    /// Pooled BEV cells, one row of `bev_channels` values per token.
    bev_cells: Mat,
    /// Context tokens after optional CAP pooling, d_model wide.
    ctx_tokens: Mat,
}

/// The trained denoiser: config, flat parameters, and the standardizer
/// its inputs and outputs live under.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    offsets: Offsets,
    params: Vec<f64>,
    standardizer: Standardizer,
}

impl PartialEq for Denoiser {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.standardizer == other.standardizer
    }
}

pub(crate) struct BlockCache {
    ln1: LayerNormCache,
    self_attn: AttnCache,
    cross: Option<(LayerNormCache, AttnCache)>,
    /// Conditioning token count at the fallback-add site (CAF off).
    ln3: LayerNormCache,
    ff_in: Mat,
    ff_pre: Mat,
    ff_act: Mat,
}

pub(crate) struct ForwardCache {
    bev_cells: Mat,
    cond: Mat,
    inputs: Mat,
    x0: Mat,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    pre_head: Mat,
}

impl Denoiser {
    /// Seeded random initialization.
    pub fn init(
        config: DenoiserConfig,
        seed: u64,
        standardizer: Standardizer,
    ) -> Result<Self, DenoiserError> {
        config.validate()?;
        let (offsets, _) = build_offsets(&config);
        let params = init_params(&config, seed);
        Ok(Self {
            config,
            offsets,
            params,
            standardizer,
        })
    }

    pub(crate) fn from_parts(
        config: DenoiserConfig,
        params: Vec<f64>,
        standardizer: Standardizer,
    ) -> Result<Self, DenoiserError> {
        config.validate()?;
        let (offsets, _) = build_offsets(&config);
        if params.len() != offsets.total {
            return Err(DenoiserError::ShapeMismatch(format!(
                "parameter vector has {} entries, config requires {}",
                params.len(),
                offsets.total
            )));
        }
        Ok(Self {
            config,
            offsets,
            params,
            standardizer,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn standardizer_ref(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Project a BEV grid into condition tokens: pooled (or per-cell when
    /// BFC is off) channel vectors through the learned linear map.
    pub fn compress_bev(&self, grid: &BevGrid) -> Result<Vec<Vec<f64>>, DenoiserError> {
        let cells = self.bev_cells(grid)?;
        let d = self.config.d_model;
        let w = &self.params[self.offsets.bev_w..self.offsets.bev_w + grid.channels * d];
        let b = &self.params[self.offsets.bev_b..self.offsets.bev_b + d];
        let projected = linear_forward(&cells, w, b, d);
        Ok((0..projected.rows).map(|r| projected.row(r).to_vec()).collect())
    }

    fn bev_cells(&self, grid: &BevGrid) -> Result<Mat, DenoiserError> {
        if grid.channels != self.config.bev_channels {
            return Err(DenoiserError::ShapeMismatch(format!(
                "grid has {} channels, model expects {}",
                grid.channels, self.config.bev_channels
            )));
        }
        let cells = if self.config.use_bfc {
            pool_bev(grid, self.config.bev_tokens[0], self.config.bev_tokens[1])?
        } else {
            pool_bev(grid, grid.height, grid.width)?
        };
        Ok(Mat::from_rows(cells))
    }

    pub(crate) fn prepare_conditioning(
        &self,
        bev: &BevGrid,
        context: &ContextEmbedding,
    ) -> Result<Conditioning, DenoiserError> {
        if context.tokens.is_empty() {
            return Err(DenoiserError::ShapeMismatch(
                "context must have at least one token".into(),
            ));
        }
        if context.d_model() != self.config.d_model {
            return Err(DenoiserError::ShapeMismatch(format!(
                "context tokens are {}-dimensional, model expects {}",
                context.d_model(),
                self.config.d_model
            )));
        }
        Ok(Conditioning {
            bev_cells: self.bev_cells(bev)?,
            ctx_tokens: Mat::from_rows(pool_context(context, self.config.use_cap)),
        })
    }

    pub(crate) fn path_to_mat_for_training(&self, path: &Path) -> Result<Mat, DenoiserError> {
        self.path_to_mat(path)
    }

    fn path_to_mat(&self, path: &Path) -> Result<Mat, DenoiserError> {
        if path.len() != self.config.horizon {
            return Err(DenoiserError::ShapeMismatch(format!(
                "path has {} waypoints, model horizon is {}",
                path.len(),
                self.config.horizon
            )));
        }
        Ok(Mat::from_rows(
            path.waypoints.iter().map(|w| vec![w.x, w.y]).collect(),
        ))
    }

    fn forward(&self, inputs: &Mat, cond_in: &Conditioning, t: f64) -> (Mat, ForwardCache) {
        let d = self.config.d_model;
        let p = &self.params;
        let o = &self.offsets;

        // Conditioning tokens: projected BEV cells then context tokens.
        let bev_proj = linear_forward(
            &cond_in.bev_cells,
            &p[o.bev_w..o.bev_w + self.config.bev_channels * d],
            &p[o.bev_b..o.bev_b + d],
            d,
        );
        let cond = bev_proj.vstack(&cond_in.ctx_tokens);

        // Path tokens: linear embedding plus positional code, plus the
        // timestep embedding when TSE is on. Positions use a disjoint
        // argument band so they cannot alias the timestep signal.
        let mut x = linear_forward(inputs, &p[o.input_w..o.input_w + 2 * d], &p[o.input_b..o.input_b + d], d);
        let tse = if self.config.use_tse {
            Some(embed_timestep(t, d).expect("config validated"))
        } else {
            None
        };
        for j in 0..x.rows {
            let pos = embed_timestep(position_code(j), d).expect("config validated");
            let row = x.row_mut(j);
            for (i, v) in row.iter_mut().enumerate() {
                *v += pos[i];
                if let Some(tse) = &tse {
                    *v += tse[i];
                }
            }
        }
        let x0 = x.clone();

        let mut blocks = Vec::with_capacity(self.config.layers);
        for block in &o.blocks {
            // Self-attention sublayer.
            let (g1, b1) = ln_params(p, &block.ln1, d);
            let (ln1_out, ln1) = layer_norm_forward(&x, g1, b1);
            let sp = attn_params(p, &block.self_attn, d);
            let (sa, self_attn) = attn_forward(&ln1_out, &ln1_out, &sp, self.config.heads);
            for (xv, av) in x.data.iter_mut().zip(&sa.data) {
                *xv += av;
            }

            // Conditioning sublayer: cross-attention, or mean-pooled add.
            let cross = if let Some((ln2_off, cross_off)) = &block.cross {
                let (g2, b2) = ln_params(p, ln2_off, d);
                let (ln2_out, ln2) = layer_norm_forward(&x, g2, b2);
                let cp = attn_params(p, cross_off, d);
                let (ca, cross_attn) = attn_forward(&ln2_out, &cond, &cp, self.config.heads);
                for (xv, av) in x.data.iter_mut().zip(&ca.data) {
                    *xv += av;
                }
                Some((ln2, cross_attn))
            } else {
                let inv = 1.0 / cond.rows as f64;
                let mut mean = vec![0.0; d];
                for r in 0..cond.rows {
                    for (m, v) in mean.iter_mut().zip(cond.row(r)) {
                        *m += v * inv;
                    }
                }
                for r in 0..x.rows {
                    for (xv, mv) in x.row_mut(r).iter_mut().zip(&mean) {
                        *xv += mv;
                    }
                }
                None
            };

            // Feed-forward sublayer.
            let (g3, b3) = ln_params(p, &block.ln3, d);
            let (ff_in, ln3) = layer_norm_forward(&x, g3, b3);
            let hidden = 4 * d;
            let ff_pre = linear_forward(
                &ff_in,
                &p[block.ff_w1..block.ff_w1 + d * hidden],
                &p[block.ff_b1..block.ff_b1 + hidden],
                hidden,
            );
            let ff_act = gelu_forward(&ff_pre);
            let ff_out = linear_forward(
                &ff_act,
                &p[block.ff_w2..block.ff_w2 + hidden * d],
                &p[block.ff_b2..block.ff_b2 + d],
                d,
            );
            for (xv, fv) in x.data.iter_mut().zip(&ff_out.data) {
                *xv += fv;
            }

            blocks.push(BlockCache {
                ln1,
                self_attn,
                cross,
                ln3,
                ff_in,
                ff_pre,
                ff_act,
            });
        }

        // Final pre-head normalization closes the residual stream, so
        // additive position/timestep codes cannot bias the head output
        // directly.
        let (gf, bf) = ln_params(p, &o.final_ln, d);
        let (pre_head, final_ln) = layer_norm_forward(&x, gf, bf);
        let out = linear_forward(
            &pre_head,
            &p[o.head_w..o.head_w + d * 2],
            &p[o.head_b..o.head_b + 2],
            2,
        );
        (
            out,
            ForwardCache {
                bev_cells: cond_in.bev_cells.clone(),
                cond,
                inputs: inputs.clone(),
                x0,
                blocks,
                final_ln,
                pre_head,
            },
        )
    }

    /// Backward from `dout` (n x 2) into the flat gradient vector.
    fn backward(&self, dout: &Mat, cache: &ForwardCache, grads: &mut [f64]) {
        let d = self.config.d_model;
        let p = &self.params;
        let o = &self.offsets;
        debug_assert_eq!(grads.len(), p.len());

        let (hw, hb) = wb_grads_mut(grads, o.head_w, d * 2, 2);
        let dnorm = linear_backward(&cache.pre_head, &p[o.head_w..o.head_w + d * 2], dout, hw, hb);
        let (gf, _) = ln_params(p, &o.final_ln, d);
        let mut dx = {
            let (gg, gb) = wb_grads_mut(grads, o.final_ln.gain, d, d);
            layer_norm_backward(&dnorm, &cache.final_ln, gf, gg, gb)
        };

        let mut dcond = Mat::zeros(cache.cond.rows, d);
        for (block, bc) in o.blocks.iter().zip(&cache.blocks).rev() {
            // Feed-forward sublayer.
            let hidden = 4 * d;
            let (w2g, b2g) = wb_grads_mut(grads, block.ff_w2, hidden * d, d);
            let dact = linear_backward(
                &bc.ff_act,
                &p[block.ff_w2..block.ff_w2 + hidden * d],
                &dx,
                w2g,
                b2g,
            );
            let dpre = gelu_backward(&bc.ff_pre, &dact);
            let (w1g, b1g) = wb_grads_mut(grads, block.ff_w1, d * hidden, hidden);
            let dff_in = linear_backward(
                &bc.ff_in,
                &p[block.ff_w1..block.ff_w1 + d * hidden],
                &dpre,
                w1g,
                b1g,
            );
            let (g3, _) = ln_params(p, &block.ln3, d);
            {
                let (gg, gb) = wb_grads_mut(grads, block.ln3.gain, d, d);
                let dres = layer_norm_backward(&dff_in, &bc.ln3, g3, gg, gb);
                for (a, b) in dx.data.iter_mut().zip(&dres.data) {
                    *a += b;
                }
            }

            // Conditioning sublayer.
            match (&block.cross, &bc.cross) {
                (Some((ln2_off, cross_off)), Some((ln2_cache, cross_cache))) => {
                    let cp = attn_params(p, cross_off, d);
                    let (dq_in, dkv) = {
                        let mut cg = attn_grads_mut(grads, cross_off, d);
                        attn_backward(&dx, cross_cache, &cp, &mut cg, self.config.heads)
                    };
                    for (a, b) in dcond.data.iter_mut().zip(&dkv.data) {
                        *a += b;
                    }
                    let (g2, _) = ln_params(p, ln2_off, d);
                    let (gg, gb) = wb_grads_mut(grads, ln2_off.gain, d, d);
                    let dres = layer_norm_backward(&dq_in, ln2_cache, g2, gg, gb);
                    for (a, b) in dx.data.iter_mut().zip(&dres.data) {
                        *a += b;
                    }
                }
                (None, None) => {
                    // Mean-pooled conditioning add: every cond row gets an
                    // equal share of each path token's gradient.
                    let inv = 1.0 / cache.cond.rows as f64;
                    for r in 0..dx.rows {
                        let dxr = dx.row(r).to_vec();
                        for cr in 0..dcond.rows {
                            for (a, b) in dcond.row_mut(cr).iter_mut().zip(&dxr) {
                                *a += b * inv;
                            }
                        }
                    }
                }
                _ => unreachable!("cache shape matches config"),
            }

            // Self-attention sublayer.
            let sp = attn_params(p, &block.self_attn, d);
            let (dq_in, dkv_in) = {
                let mut sg = attn_grads_mut(grads, &block.self_attn, d);
                attn_backward(&dx, &bc.self_attn, &sp, &mut sg, self.config.heads)
            };
            let mut dln1 = dq_in;
            for (a, b) in dln1.data.iter_mut().zip(&dkv_in.data) {
                *a += b;
            }
            let (g1, _) = ln_params(p, &block.ln1, d);
            let (gg, gb) = wb_grads_mut(grads, block.ln1.gain, d, d);
            let dres = layer_norm_backward(&dln1, &bc.ln1, g1, gg, gb);
            for (a, b) in dx.data.iter_mut().zip(&dres.data) {
                *a += b;
            }
        }

        // Input embedding (positional and timestep codes are constants).
        let (iw, ib) = wb_grads_mut(grads, o.input_w, 2 * d, d);
        let _ = linear_backward(&cache.inputs, &p[o.input_w..o.input_w + 2 * d], &dx, iw, ib);
        let _ = &cache.x0;

        // BEV projection receives the first rows of the conditioning grad.
        let bev_rows = cache.bev_cells.rows;
        let mut dbev = Mat::zeros(bev_rows, d);
        dbev.data
            .copy_from_slice(&dcond.data[..bev_rows * d]);
        let (bw, bb) = wb_grads_mut(grads, o.bev_w, self.config.bev_channels * d, d);
        let _ = linear_backward(
            &cache.bev_cells,
            &p[o.bev_w..o.bev_w + self.config.bev_channels * d],
            &dbev,
            bw,
            bb,
        );
    }

    fn mat_to_path(&self, m: &Mat, dt: f64) -> Path {
        Path {
            dt,
            waypoints: (0..m.rows)
                .map(|r| Waypoint::new(m.row(r)[0], m.row(r)[1]))
                .collect(),
        }
    }

    /// Predict the clean path from a noisy one under the conditions at
    /// reverse time `t`. Deterministic; no stochastic layers.
    pub fn denoise(
        &self,
        noisy: &Path,
        bev: &BevGrid,
        context: &ContextEmbedding,
        t: f64,
    ) -> Result<Path, DenoiserError> {
        let cond = self.prepare_conditioning(bev, context)?;
        let inputs = self.path_to_mat(noisy)?;
        let (out, _) = self.forward(&inputs, &cond, t);
        Ok(self.mat_to_path(&out, noisy.dt))
    }

    pub(crate) fn loss_prepared(
        &self,
        inputs: &Mat,
        cond: &Conditioning,
        t: f64,
        target: &Mat,
    ) -> (LossBreakdown, Mat, ForwardCache) {
        let (pred, cache) = self.forward(inputs, cond, t);
        let n = pred.rows;
        let inv_2n = 1.0 / (2 * n) as f64;
        let mut waypoint_mse = 0.0;
        let mut cum_pred = [0.0f64; 2];
        let mut cum_tgt = [0.0f64; 2];
        let mut cumsum_mse = 0.0;
        let mut cum_diffs = Mat::zeros(n, 2);
        for j in 0..n {
            for c in 0..2 {
                let e = pred.row(j)[c] - target.row(j)[c];
                waypoint_mse += e * e * inv_2n;
                cum_pred[c] += pred.row(j)[c];
                cum_tgt[c] += target.row(j)[c];
                let ce = cum_pred[c] - cum_tgt[c];
                cum_diffs.row_mut(j)[c] = ce;
                cumsum_mse += ce * ce * inv_2n;
            }
        }
        // d(loss)/d(pred_jc) = e_jc / n + sum_{m >= j} cumdiff_mc / n.
        let inv_n = 1.0 / n as f64;
        let mut dpred = Mat::zeros(n, 2);
        let mut suffix = [0.0f64; 2];
        for j in (0..n).rev() {
            for c in 0..2 {
                suffix[c] += cum_diffs.row(j)[c];
                dpred.row_mut(j)[c] =
                    (pred.row(j)[c] - target.row(j)[c]) * inv_n + suffix[c] * inv_n;
            }
        }
        (LossBreakdown::new(waypoint_mse, cumsum_mse), dpred, cache)
    }

    /// Both loss terms for one training example.
    pub fn loss(&self, example: &TrainingExample) -> Result<LossBreakdown, DenoiserError> {
        let cond = self.prepare_conditioning(&example.bev, &example.context)?;
        let inputs = self.path_to_mat(&example.noised_path)?;
        let target = self.path_to_mat(&example.target)?;
        let (breakdown, _, _) = self.loss_prepared(&inputs, &cond, example.time, &target);
        Ok(breakdown)
    }

    /// Loss plus parameter gradient for one example, accumulated into
    /// `grads` (which must be zeroed by the caller if a fresh gradient is
    /// wanted).
    pub(crate) fn loss_and_grad(
        &self,
        inputs: &Mat,
        cond: &Conditioning,
        t: f64,
        target: &Mat,
        grads: &mut [f64],
    ) -> LossBreakdown {
        let (breakdown, dpred, cache) = self.loss_prepared(inputs, cond, t, target);
        self.backward(&dpred, &cache, grads);
        breakdown
    }
}

impl DenoiseModel for Denoiser {
    fn predict(
        &self,
        noisy: &Path,
        bev: &BevGrid,
        context: &ContextEmbedding,
        t: f64,
    ) -> Result<Path, DenoiseError> {
        self.denoise(noisy, bev, context, t)
            .map_err(|e| DenoiseError(e.to_string()))
    }

    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }
}

/// Gradient check: maximum relative error between the analytic gradient
/// and central finite differences over `probes` randomly selected
/// parameters of a seeded model on a seeded synthetic example. The
/// relative error uses a unit floor, so near-zero gradients are compared
/// absolutely.
pub fn grad_check(config: &DenoiserConfig, eps: f64, probes: usize) -> Result<f64, DenoiserError> {
    use crate::rng::rng_from_seed;
    use rand::Rng;

    assert!(eps > 0.0, "eps must be positive");
    config.validate()?;
    let mut model = Denoiser::init(*config, 0xcafe, Standardizer::identity())?;

    let mut rng = rng_from_seed(0xbeef);
    let grid_cfg = crate::scene::GridConfig {
        channels: config.bev_channels,
        height: config.bev_tokens[0] * 2,
        width: config.bev_tokens[1] * 2,
        resolution: 0.5,
    };
    let mut bev = BevGrid::zeros(&grid_cfg);
    for v in &mut bev.data {
        *v = rng.gen_range(0.0..1.0);
    }
    let context = ContextEmbedding {
        tokens: (0..3)
            .map(|_| (0..config.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
    };
    let mut random_path = || -> Path {
        Path {
            dt: 0.5,
            waypoints: (0..config.horizon)
                .map(|_| Waypoint::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect(),
        }
    };
    let noisy = random_path();
    let target = random_path();
    let t = rng.gen_range(0.0..3.0);

    let cond = model.prepare_conditioning(&bev, &context)?;
    let inputs = model.path_to_mat(&noisy)?;
    let target_mat = model.path_to_mat(&target)?;

    let mut grads = vec![0.0; model.param_count()];
    let _ = model.loss_and_grad(&inputs, &cond, t, &target_mat, &mut grads);

    let total = model.param_count();
    let mut max_err = 0.0f64;
    for _ in 0..probes.max(1) {
        let i = rng.gen_range(0..total);
        let orig = model.params[i];
        model.params_mut()[i] = orig + eps;
        let (plus, _, _) = model.loss_prepared(&inputs, &cond, t, &target_mat);
        model.params_mut()[i] = orig - eps;
        let (minus, _, _) = model.loss_prepared(&inputs, &cond, t, &target_mat);
        model.params_mut()[i] = orig;
        let numeric = (plus.total - minus.total) / (2.0 * eps);
        let analytic = grads[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests;
