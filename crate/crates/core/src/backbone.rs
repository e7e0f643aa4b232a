//! Large-kernel selection backbone: stacked blocks that pair a spatially
//! gated large-kernel branch with a conv FFN, both as pre-norm residual
//! sub-modules, arranged in four stages at strides 4/8/16/32.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::layers::{Conv2dLayer, LayerNormLayer};
use crate::params::ParamStore;
use crate::profiler::{LayerDesc, LayerKind, ModuleGraph};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Pyramid levels as tape values (strides 8/16/32 of the input).
#[derive(Clone, Copy)]
pub struct PyramidIds {
    pub s3: ValueId,
    pub s4: ValueId,
    pub s5: ValueId,
}

/// Pyramid levels as plain tensors.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub s3: Tensor,
    pub s4: Tensor,
    pub s5: Tensor,
}

/// The two stacked depthwise convolutions decompose a large receptive
/// field; a pooled descriptor drives per-pixel sigmoid weights that blend
/// the two branch features before a pointwise mix gates the input.
pub struct LkSelection {
    pub dw5: Conv2dLayer,
    pub dw7: Conv2dLayer,
    pub reduce1: Conv2dLayer,
    pub reduce2: Conv2dLayer,
    pub select: Conv2dLayer,
    pub mix: Conv2dLayer,
    channels: usize,
}

impl LkSelection {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!(
                "lk selection width {channels} must be even for the branch reduction"
            )));
        }
        Ok(LkSelection {
            dw5: Conv2dLayer::new(ps, rng, &format!("{name}.dw5"), ConvSpec::depthwise(channels, 5, 1)),
            dw7: Conv2dLayer::new(ps, rng, &format!("{name}.dw7"), ConvSpec::depthwise(channels, 7, 3)),
            reduce1: Conv2dLayer::new(ps, rng, &format!("{name}.reduce1"), ConvSpec::pointwise(channels, channels / 2)),
            reduce2: Conv2dLayer::new(ps, rng, &format!("{name}.reduce2"), ConvSpec::pointwise(channels, channels / 2)),
            select: Conv2dLayer::new(ps, rng, &format!("{name}.select"), ConvSpec::dense(2, 2, 7, 1, 3)),
            mix: Conv2dLayer::new(ps, rng, &format!("{name}.mix"), ConvSpec::pointwise(channels, channels)),
            channels,
        })
    }

    /// Theoretical receptive fields of the two branches in input pixels.
    /// Branch B sees the 5x5 branch output through a dilated 7x7, so its
    /// field is 5 + (7-1)*3.
    pub fn branch_receptive_fields(&self) -> (usize, usize) {
        let a = self.dw5.spec.receptive_field();
        let b = a + self.dw7.spec.receptive_field() - 1;
        (a, b)
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = t.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "lk selection built for {} channels, input has {c}",
                self.channels
            )));
        }
        let u1 = self.dw5.forward(t, ps, x)?;
        let u2 = self.dw7.forward(t, ps, u1)?;
        let v1 = self.reduce1.forward(t, ps, u1)?;
        let v2 = self.reduce2.forward(t, ps, u2)?;
        let stack = t.concat(&[v1, v2], 1)?;
        let avg = t.channel_mean(stack)?;
        let mx = t.channel_max(stack)?;
        let desc = t.concat(&[avg, mx], 1)?;
        let sel = self.select.forward(t, ps, desc)?;
        let weights = t.sigmoid(sel);
        let wtok = t.tokens_from_nchw(weights)?;
        let w1c = t.col(wtok, 0)?;
        let w2c = t.col(wtok, 1)?;
        let w1 = t.reshape(w1c, &[n, 1, h, w])?;
        let w2 = t.reshape(w2c, &[n, 1, h, w])?;
        let g1 = t.mul_channel_broadcast(u1, w1)?;
        let g2 = t.mul_channel_broadcast(u2, w2)?;
        let fused = t.add(g1, g2)?;
        let mixed = self.mix.forward(t, ps, fused)?;
        t.mul(x, mixed)
    }

    pub fn describe(&self, out: &mut Vec<LayerDesc>, hw: (usize, usize)) -> Result<()> {
        let c = self.channels;
        let elems = c * hw.0 * hw.1;
        self.dw5.describe(out, hw)?;
        self.dw7.describe(out, hw)?;
        self.reduce1.describe(out, hw)?;
        self.reduce2.describe(out, hw)?;
        out.push(LayerDesc {
            name: format!("{}.pool", self.select.name.trim_end_matches(".select")),
            kind: LayerKind::Elementwise { elems: 2 * elems },
        });
        self.select.describe(out, hw)?;
        out.push(LayerDesc {
            name: format!("{}.gate", self.mix.name.trim_end_matches(".mix")),
            kind: LayerKind::Elementwise { elems: 3 * elems },
        });
        self.mix.describe(out, hw)?;
        Ok(())
    }
}

/// Conv FFN: pointwise expansion, depthwise 3x3, GELU, pointwise
/// contraction. Input and output widths match so the residual applies.
pub struct LskFfn {
    pub expand: Conv2dLayer,
    pub dw: Conv2dLayer,
    pub contract: Conv2dLayer,
}

impl LskFfn {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let hidden = channels * 4;
        LskFfn {
            expand: Conv2dLayer::new(ps, rng, &format!("{name}.expand"), ConvSpec::pointwise(channels, hidden)),
            dw: Conv2dLayer::new(ps, rng, &format!("{name}.dw"), ConvSpec::depthwise(hidden, 3, 1)),
            contract: Conv2dLayer::new(ps, rng, &format!("{name}.contract"), ConvSpec::pointwise(hidden, channels)),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: ValueId) -> Result<ValueId> {
        let e = self.expand.forward(t, ps, x)?;
        let d = self.dw.forward(t, ps, e)?;
        let a = t.gelu(d);
        self.contract.forward(t, ps, a)
    }

    pub fn describe(&self, out: &mut Vec<LayerDesc>, hw: (usize, usize)) -> Result<()> {
        self.expand.describe(out, hw)?;
        self.dw.describe(out, hw)?;
        out.push(LayerDesc {
            name: format!("{}.gelu", self.dw.name.trim_end_matches(".dw")),
            kind: LayerKind::Activation {
                elems: self.dw.spec.out_channels * hw.0 * hw.1,
            },
        });
        self.contract.describe(out, hw)?;
        Ok(())
    }
}

/// One backbone block: two pre-norm residual sub-modules.
pub struct LskBlock {
    pub norm1: LayerNormLayer,
    pub lk: LkSelection,
    pub norm2: LayerNormLayer,
    pub ffn: LskFfn,
}

impl LskBlock {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        Ok(LskBlock {
            norm1: LayerNormLayer::new(ps, &format!("{name}.norm1"), channels),
            lk: LkSelection::new(ps, rng, &format!("{name}.lk"), channels)?,
            norm2: LayerNormLayer::new(ps, &format!("{name}.norm2"), channels),
            ffn: LskFfn::new(ps, rng, &format!("{name}.ffn"), channels),
        })
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: ValueId) -> Result<ValueId> {
        let n1 = self.norm1.forward_channels(t, ps, x)?;
        let lk = self.lk.forward(t, ps, n1)?;
        let z = t.add(x, lk)?;
        let n2 = self.norm2.forward_channels(t, ps, z)?;
        let f = self.ffn.forward(t, ps, n2)?;
        t.add(z, f)
    }

    pub fn describe(&self, out: &mut Vec<LayerDesc>, hw: (usize, usize)) -> Result<()> {
        let positions = hw.0 * hw.1;
        self.norm1.describe(out, positions);
        self.lk.describe(out, hw)?;
        self.norm2.describe(out, positions);
        self.ffn.describe(out, hw)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Channel width of each of the four stages (strides 4/8/16/32).
    pub widths: Vec<usize>,
    /// Blocks per stage.
    pub depths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![16, 32, 64, 128],
            depths: vec![1, 1, 1, 1],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.depths.len() != 4 {
            return Err(Error::Config(format!(
                "backbone needs 4 stages, got widths {:?} / depths {:?}",
                self.widths, self.depths
            )));
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "stage widths must be non-decreasing, got {:?}",
                self.widths
            )));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.widths.iter().any(|&w| w % 2 != 0) {
            return Err(Error::Config(format!(
                "stage widths must be even, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }
}

pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2dLayer,
    stages: Vec<Vec<LskBlock>>,
    transitions: Vec<Conv2dLayer>,
}

/// Optional per-layer activation capture used by the heatmap exporter.
pub type Captures = std::collections::BTreeMap<String, Tensor>;

impl Backbone {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stem = Conv2dLayer::new(
            ps,
            rng,
            "backbone.stem",
            ConvSpec::dense(3, config.widths[0], 7, 4, 3),
        );
        let mut stages = Vec::new();
        for (i, (&w, &d)) in config.widths.iter().zip(&config.depths).enumerate() {
            let mut blocks = Vec::new();
            for j in 0..d {
                blocks.push(LskBlock::new(ps, rng, &format!("backbone.stage{i}.block{j}"), w)?);
            }
            stages.push(blocks);
        }
        let mut transitions = Vec::new();
        for i in 0..3 {
            transitions.push(Conv2dLayer::new(
                ps,
                rng,
                &format!("backbone.transition{i}"),
                ConvSpec::dense(config.widths[i], config.widths[i + 1], 3, 2, 1),
            ));
        }
        Ok(Backbone {
            config,
            stem,
            stages,
            transitions,
        })
    }

    pub fn check_input(shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!(
                "backbone expects N x 3 x H x W input, got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input extents must be multiples of 32 (pyramid reaches stride 32), got {h}x{w}"
            )));
        }
        Ok((shape[0], h, w))
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        ps: &ParamStore,
        image: ValueId,
        caps: Option<&mut Captures>,
    ) -> Result<PyramidIds> {
        Self::check_input(t.shape(image))?;
        let mut caps = caps;
        let mut x = self.stem.forward(t, ps, image)?;
        if let Some(c) = caps.as_deref_mut() {
            c.insert("backbone.stem".into(), t.value(x).clone());
        }
        let mut taps = Vec::new();
        for (i, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(t, ps, x)?;
            }
            if let Some(c) = caps.as_deref_mut() {
                c.insert(format!("backbone.stage{i}"), t.value(x).clone());
            }
            if i >= 1 {
                taps.push(x);
            }
            if i < 3 {
                x = self.transitions[i].forward(t, ps, x)?;
            }
        }
        Ok(PyramidIds {
            s3: taps[0],
            s4: taps[1],
            s5: taps[2],
        })
    }

    /// Channel widths of the emitted pyramid levels.
    pub fn pyramid_widths(&self) -> (usize, usize, usize) {
        (
            self.config.widths[1],
            self.config.widths[2],
            self.config.widths[3],
        )
    }

    pub fn describe(&self, input_hw: (usize, usize)) -> Result<ModuleGraph> {
        let mut g = ModuleGraph::new("lsk backbone");
        let mut hw = self.stem.describe(&mut g.layers, input_hw)?;
        for (i, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                b.describe(&mut g.layers, hw)?;
            }
            if i < 3 {
                hw = self.transitions[i].describe(&mut g.layers, hw)?;
            }
        }
        Ok(g)
    }
}
