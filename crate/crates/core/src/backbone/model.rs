use crate::error::{Error, Result};
use crate::rng::{normal_tensor, stream};
use crate::tensor::{ConvOpts, Graph, ParamSet, Scalar, Tensor, Var};

use super::blocks::{conv_act, dws_block_forward, BlockVars, SeVars};
use super::spec::ModelSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvRef {
    weight: usize,
    bias: usize,
    opts: ConvOpts,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct SeRef {
    fc1_weight: usize,
    fc1_bias: usize,
    fc2_weight: usize,
    fc2_bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BlockRef {
    dw: ConvRef,
    pw: ConvRef,
    se: Option<SeRef>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stem: ConvRef,
    blocks: Vec<BlockRef>,
    neck: ConvRef,
    head: ConvRef,
}

/// Raw outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `N×C_neck×H/stride×W/stride`, the distillation tap.
    pub neck: Var,
    /// `N×(1+K+4)×H/stride×W/stride`: objectness, class logits, box offsets.
    pub head: Var,
}

/// Parameters plus architecture of a teacher or student detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    params: ParamSet<T>,
    layout: Layout,
}

/// Parameter names and shapes in checkpoint order, plus the layout indices.
fn plan(spec: &ModelSpec) -> (Vec<(String, Vec<usize>)>, Layout) {
    let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| {
        entries.push((name, shape));
        entries.len() - 1
    };
    let mut conv = |prefix: &str, cout: usize, cin_g: usize, k: usize, opts: ConvOpts| ConvRef {
        weight: add(format!("{prefix}.weight"), vec![cout, cin_g, k, k]),
        bias: add(format!("{prefix}.bias"), vec![cout]),
        opts,
    };
    let s = &spec.stem;
    let stem = conv(
        "stem",
        s.out_channels,
        s.in_channels,
        s.kernel,
        ConvOpts {
            stride: s.stride,
            padding: s.kernel / 2,
            groups: 1,
        },
    );
    let mut blocks = Vec::new();
    for (i, b) in spec.blocks.iter().enumerate() {
        let dw = conv(
            &format!("blocks.{i}.dw"),
            b.in_channels,
            1,
            b.kernel,
            ConvOpts {
                stride: b.stride,
                padding: b.kernel / 2,
                groups: b.in_channels,
            },
        );
        let pw = conv(
            &format!("blocks.{i}.pw"),
            b.out_channels,
            b.in_channels,
            1,
            ConvOpts::default(),
        );
        blocks.push((dw, pw));
    }
    let last = spec.blocks.last().map_or(spec.stem.out_channels, |b| b.out_channels);
    let neck = conv("neck", spec.neck_channels, last, 1, ConvOpts::default());
    let head = conv(
        "head",
        spec.head.channels(),
        spec.neck_channels,
        1,
        ConvOpts::default(),
    );
    // SE parameters are appended per block after the conv entries so the
    // conv naming stays contiguous.
    let mut full_blocks = Vec::new();
    for (i, ((dw, pw), b)) in blocks.into_iter().zip(&spec.blocks).enumerate() {
        let se = b.use_se.then(|| {
            let c = b.out_channels;
            let hidden = c / spec.se_reduction;
            SeRef {
                fc1_weight: add(format!("blocks.{i}.se.fc1.weight"), vec![hidden, c]),
                fc1_bias: add(format!("blocks.{i}.se.fc1.bias"), vec![hidden]),
                fc2_weight: add(format!("blocks.{i}.se.fc2.weight"), vec![c, hidden]),
                fc2_bias: add(format!("blocks.{i}.se.fc2.bias"), vec![c]),
            }
        });
        full_blocks.push(BlockRef { dw, pw, se });
    }
    let layout = Layout {
        stem,
        blocks: full_blocks,
        neck,
        head,
    };
    (entries, layout)
}

fn fan_in(name: &str, shape: &[usize]) -> usize {
    if name.contains(".fc") {
        shape[1]
    } else {
        shape[1..].iter().product()
    }
}

impl<T: Scalar> Model<T> {
    /// He-normal weights (`std = sqrt(2/fan_in)`) and zero biases, drawn from a
    /// stream derived from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (entries, layout) = plan(&spec);
        let mut rng = stream(seed, "model-init");
        let mut params = ParamSet::new();
        for (name, shape) in entries {
            let value = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let std = (2.0 / fan_in(&name, &shape) as f64).sqrt();
                normal_tensor(&mut rng, &shape, std)
            };
            params.push(name, value);
        }
        Ok(Model {
            spec,
            params,
            layout,
        })
    }

    /// Wraps existing parameters; names and shapes must match the `ModelSpec` layout exactly.
    pub fn from_params(spec: ModelSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        let (entries, layout) = plan(&spec);
        if entries.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "spec {:?} needs {} tensors, found {}",
                spec.name,
                entries.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in entries.iter().zip(params.iter()) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Model {
            spec,
            params,
            layout,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Enumerated depthwise + pointwise kernel weights of block `i`.
    pub fn block_kernel_weights(&self, i: usize) -> usize {
        let b = &self.layout.blocks[i];
        self.params.get(b.dw.weight).value.numel() + self.params.get(b.pw.weight).value.numel()
    }

    pub fn block_vars(&self, vars: &[Var], i: usize) -> BlockVars {
        let b = &self.layout.blocks[i];
        BlockVars {
            dw_weight: vars[b.dw.weight],
            dw_bias: vars[b.dw.bias],
            pw_weight: vars[b.pw.weight],
            pw_bias: vars[b.pw.bias],
            se: b.se.map(|s| SeVars {
                fc1_weight: vars[s.fc1_weight],
                fc1_bias: vars[s.fc1_bias],
                fc2_weight: vars[s.fc2_weight],
                fc2_bias: vars[s.fc2_bias],
            }),
        }
    }

    /// Runs `images: N×1×H×W` through the network using `vars` from
    /// [`ParamSet::bind`] or [`ParamSet::bind_frozen`].
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], images: Var) -> Result<ForwardOutput> {
        let shape = g.shape(images).to_vec();
        let stride = self.spec.total_stride();
        if shape.len() != 4 || shape[1] != self.spec.stem.in_channels {
            return Err(Error::Dimension(format!(
                "expected N×{}×H×W images, got {shape:?}",
                self.spec.stem.in_channels
            )));
        }
        if shape[2] % stride != 0 || shape[3] % stride != 0 {
            return Err(Error::Dimension(format!(
                "image size {}×{} is not a multiple of total stride {stride}",
                shape[2], shape[3]
            )));
        }
        let act = Some(self.spec.activation);
        let l = &self.layout;
        let mut x = conv_act(g, images, vars[l.stem.weight], vars[l.stem.bias], l.stem.opts, act)?;
        for (i, spec) in self.spec.blocks.iter().enumerate() {
            let bv = self.block_vars(vars, i);
            x = dws_block_forward(g, x, spec, self.spec.se_reduction, &bv)?;
        }
        let neck = conv_act(g, x, vars[l.neck.weight], vars[l.neck.bias], l.neck.opts, act)?;
        let head = conv_act(g, neck, vars[l.head.weight], vars[l.head.bias], l.head.opts, None)?;
        Ok(ForwardOutput { neck, head })
    }
}
