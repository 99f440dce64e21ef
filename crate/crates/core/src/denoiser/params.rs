//! Flat parameter vector with a named, config-determined layout.
//!
//! The layout (and therefore the parameter count) is a pure function of
//! the config; the artifact format serializes the vector in this order.

use super::DenoiserConfig;
use crate::rng::{derive_seed, rng_from_seed};
use rand_distr::{Distribution, Normal};

/// Offsets of one attention block's eight parameter segments.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnOffsets {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNormOffsets {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockOffsets {
    pub ln1: LayerNormOffsets,
    pub self_attn: AttnOffsets,
    /// Present only with cross-attention fusion enabled.
    pub cross: Option<(LayerNormOffsets, AttnOffsets)>,
    pub ln3: LayerNormOffsets,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub input_w: usize,
    pub input_b: usize,
    pub bev_w: usize,
    pub bev_b: usize,
    pub blocks: Vec<BlockOffsets>,
    pub final_ln: LayerNormOffsets,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

/// One named segment of the flat vector: `(name, offset, len)`.
pub type LayoutEntry = (String, usize, usize);

struct LayoutBuilder {
    entries: Vec<LayoutEntry>,
    cursor: usize,
}

impl LayoutBuilder {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            cursor: 0,
        }
    }

    fn push(&mut self, name: String, len: usize) -> usize {
        let offset = self.cursor;
        self.entries.push((name, offset, len));
        self.cursor += len;
        offset
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> LayerNormOffsets {
        LayerNormOffsets {
            gain: self.push(format!("{name}.gain"), d),
            bias: self.push(format!("{name}.bias"), d),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttnOffsets {
        AttnOffsets {
            wq: self.push(format!("{name}.wq"), d * d),
            bq: self.push(format!("{name}.bq"), d),
            wk: self.push(format!("{name}.wk"), d * d),
            bk: self.push(format!("{name}.bk"), d),
            wv: self.push(format!("{name}.wv"), d * d),
            bv: self.push(format!("{name}.bv"), d),
            wo: self.push(format!("{name}.wo"), d * d),
            bo: self.push(format!("{name}.bo"), d),
        }
    }
}

pub(crate) fn build_offsets(config: &DenoiserConfig) -> (Offsets, Vec<LayoutEntry>) {
    let d = config.d_model;
    let mut b = LayoutBuilder::new();
    let input_w = b.push("input.w".into(), 2 * d);
    let input_b = b.push("input.b".into(), d);
    let bev_w = b.push("bev.w".into(), config.bev_channels * d);
    let bev_b = b.push("bev.b".into(), d);
    let mut blocks = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let ln1 = b.layer_norm(&format!("block{l}.ln1"), d);
        let self_attn = b.attention(&format!("block{l}.self_attn"), d);
        let cross = if config.use_caf {
            let ln2 = b.layer_norm(&format!("block{l}.ln2"), d);
            let cross = b.attention(&format!("block{l}.cross_attn"), d);
            Some((ln2, cross))
        } else {
            None
        };
        let ln3 = b.layer_norm(&format!("block{l}.ln3"), d);
        let hidden = 4 * d;
        let ff_w1 = b.push(format!("block{l}.ff.w1"), d * hidden);
        let ff_b1 = b.push(format!("block{l}.ff.b1"), hidden);
        let ff_w2 = b.push(format!("block{l}.ff.w2"), hidden * d);
        let ff_b2 = b.push(format!("block{l}.ff.b2"), d);
        blocks.push(BlockOffsets {
            ln1,
            self_attn,
            cross,
            ln3,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
        });
    }
    let final_ln = b.layer_norm("final_ln", d);
    let head_w = b.push("head.w".into(), d * 2);
    let head_b = b.push("head.b".into(), 2);
    let total = b.cursor;
    (
        Offsets {
            input_w,
            input_b,
            bev_w,
            bev_b,
            blocks,
            final_ln,
            head_w,
            head_b,
            total,
        },
        b.entries,
    )
}

/// Total parameter count for a config.
pub fn param_count(config: &DenoiserConfig) -> usize {
    build_offsets(config).0.total
}

/// Named layout of the flat parameter vector for a config.
pub fn param_layout(config: &DenoiserConfig) -> Vec<LayoutEntry> {
    build_offsets(config).1
}

/// Seeded initialization: layer-norm gains 1, biases 0, weight matrices
/// N(0, 1/fan_in) drawn segment by segment in layout order.
pub(crate) fn init_params(config: &DenoiserConfig, seed: u64) -> Vec<f64> {
    let layout = param_layout(config);
    let total: usize = layout.iter().map(|(_, _, len)| len).sum();
    let mut params = vec![0.0; total];
    let mut rng = rng_from_seed(derive_seed(seed, 0x1217));
    let d = config.d_model as f64;
    for (name, offset, len) in &layout {
        let slot = &mut params[*offset..*offset + *len];
        if name.ends_with(".gain") {
            slot.fill(1.0);
            continue;
        }
        // Weight matrices get N(0, 1/fan_in); everything else is a bias.
        let fan_in = match name.as_str() {
            "input.w" => 2.0,
            "bev.w" => config.bev_channels as f64,
            "head.w" => d,
            n if n.ends_with(".ff.w1") => d,
            n if n.ends_with(".ff.w2") => 4.0 * d,
            n if n.ends_with(".wq")
                || n.ends_with(".wk")
                || n.ends_with(".wv")
                || n.ends_with(".wo") =>
            {
                d
            }
            _ => 0.0,
        };
        if fan_in > 0.0 {
            let dist = Normal::new(0.0, 1.0 / fan_in.sqrt()).unwrap();
            for v in slot {
                *v = dist.sample(&mut rng);
            }
        }
    }
    params
}
