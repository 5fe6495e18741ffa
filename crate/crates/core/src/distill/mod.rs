//! Focal and global feature distillation over teacher/student neck maps.
//!
//! Batch tensors are `N×C×H×W`. Feature losses are summed over channels and
//! cells and averaged over the batch; attention L1 terms are element means.

mod global;
mod masks;

use serde::{Deserialize, Serialize};

use crate::bbox::Xywh;
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, stream};
use crate::tensor::{ConvOpts, Graph, ParamSet, Scalar, Tensor, Var};

pub use global::{global_context, global_loss, global_relation, GlobalBlockParams, GlobalVars};
pub use masks::{binary_mask, boxes_to_cells, claimed_cells, scale_mask};

/// Temperature and loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 0.5,
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.1,
            lambda: 0.5,
        }
    }
}

impl DistillConfig {
    /// Default temperature with every weight zeroed.
    pub fn disabled() -> Self {
        DistillConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "distill.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("distill.{name} must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 && self.lambda == 0.0
    }
}

/// Per-image masks: `m`, `s`, `a_s` are `H×W`, `a_c` has length `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<T = f32> {
    pub m: Tensor<T>,
    pub s: Tensor<T>,
    pub a_s: Tensor<T>,
    pub a_c: Tensor<T>,
}

impl<T: Scalar> MaskSet<T> {
    /// Masks for one image from boxes in cell coordinates and the teacher's
    /// `C×H×W` feature map.
    pub fn new(boxes: &[Xywh], teacher: &Tensor<T>, temperature: f64) -> Result<Self> {
        let shape = teacher.shape();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!("expected C×H×W features, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        let (_, _, a_s, a_c) = attention_tensors(teacher, temperature)?;
        Ok(MaskSet {
            m: binary_mask(boxes, h, w),
            s: scale_mask(boxes, h, w),
            a_s,
            a_c,
        })
    }
}

/// Graph handles for `G_S` (`N×1×H×W`), `G_C` (`N×C×1×1`) and their
/// temperature-softmax attentions scaled to sum to `H·W` and `C`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub g_s: Var,
    pub g_c: Var,
    pub a_s: Var,
    pub a_c: Var,
}

pub fn attention_maps<T: Scalar>(g: &mut Graph<T>, f: Var, temperature: f64) -> Result<AttentionVars> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("expected N×C×H×W features, got {shape:?}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let inv_t = T::of(1.0 / temperature);
    let g_s = g.abs_mean(f, &[1])?;
    let z = g.scale(g_s, inv_t)?;
    let a_s = g.softmax_scaled(z, &[2, 3], hw as f64)?;
    let g_c = g.abs_mean(f, &[2, 3])?;
    let z = g.scale(g_c, inv_t)?;
    let a_c = g.softmax_scaled(z, &[1], c as f64)?;
    Ok(AttentionVars { g_s, g_c, a_s, a_c })
}

/// [`attention_maps`] on a single `C×H×W` tensor: `(G_S, G_C, A_S, A_C)` shaped
/// `H×W`, `C`, `H×W`, `C`.
pub fn attention_tensors<T: Scalar>(
    f: &Tensor<T>,
    temperature: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = f.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("expected C×H×W features, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut g = Graph::new();
    let x = g.constant(f.clone().reshape([1, c, h, w])?);
    let av = attention_maps(&mut g, x, temperature)?;
    let take = |v: Var, s: &[usize]| g.value(v).clone().reshape(s.to_vec());
    Ok((
        take(av.g_s, &[h, w])?,
        take(av.g_c, &[c])?,
        take(av.a_s, &[h, w])?,
        take(av.a_c, &[c])?,
    ))
}

fn check_same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Stacks a per-image field of the mask sets into an `N×1×H×W` or `N×C×1×1`
/// constant.
fn stack<T: Scalar>(
    g: &mut Graph<T>,
    masks: &[MaskSet<T>],
    shape: [usize; 3],
    pick: impl Fn(&MaskSet<T>) -> Vec<T>,
) -> Result<Var> {
    let mut data = Vec::with_capacity(masks.len() * shape.iter().product::<usize>());
    for m in masks {
        data.extend(pick(m));
    }
    let t = Tensor::new([masks.len(), shape[0], shape[1], shape[2]], data)?;
    Ok(g.constant(t))
}

/// Foreground and background parts of the focal feature loss, already
/// multiplied by `α` and `β`, and their sum.
#[derive(Clone, Copy, Debug)]
pub struct FocalFeatureVars {
    pub fg: Var,
    pub bg: Var,
    pub total: Var,
}

/// `α·Σ M·S·A_S·A_C·(F_T − F_S)² + β·Σ (1−M)·S·A_S·A_C·(F_T − F_S)²`, batch
/// mean. `f_s` is the adapted student map; `f_t` is detached here.
pub fn focal_feature_loss<T: Scalar>(
    g: &mut Graph<T>,
    f_t: Var,
    f_s: Var,
    masks: &[MaskSet<T>],
    alpha: f64,
    beta: f64,
) -> Result<FocalFeatureVars> {
    check_same_shape(g, f_t, f_s, "focal feature loss")?;
    let shape = g.shape(f_t).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("expected N×C×H×W features, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if masks.len() != n {
        return Err(Error::Dimension(format!("{} mask sets for batch of {n}", masks.len())));
    }
    for ms in masks {
        if ms.m.shape() != [h, w] || ms.a_c.shape() != [c] {
            return Err(Error::Dimension(format!(
                "masks {:?}/{:?} do not match features {shape:?}",
                ms.m.shape(),
                ms.a_c.shape()
            )));
        }
    }
    let weighted = |ms: &MaskSet<T>, fg: bool| -> Vec<T> {
        let (m, s, a) = (ms.m.data(), ms.s.data(), ms.a_s.data());
        (0..h * w)
            .map(|k| {
                let sel = if fg { m[k] } else { T::one() - m[k] };
                sel * s[k] * a[k]
            })
            .collect()
    };
    let fg_w = stack(g, masks, [1, h, w], |ms| weighted(ms, true))?;
    let bg_w = stack(g, masks, [1, h, w], |ms| weighted(ms, false))?;
    let a_c = stack(g, masks, [c, 1, 1], |ms| ms.a_c.data().to_vec())?;

    let f_t = g.detach(f_t);
    let diff = g.sub(f_t, f_s)?;
    let sq = g.square(diff)?;
    let sq = g.mul(sq, a_c)?;
    let inv_n = 1.0 / n as f64;
    let mut part = |weights: Var, coef: f64| -> Result<Var> {
        let x = g.mul(sq, weights)?;
        let s = g.sum_all(x)?;
        g.scale(s, T::of(coef * inv_n))
    };
    let fg = part(fg_w, alpha)?;
    let bg = part(bg_w, beta)?;
    let total = g.add(fg, bg)?;
    Ok(FocalFeatureVars { fg, bg, total })
}

/// `γ·(mean|A_S^T − A_S^S| + mean|A_C^T − A_C^S|)`; the teacher side is detached.
pub fn attention_loss<T: Scalar>(
    g: &mut Graph<T>,
    teacher: &AttentionVars,
    student: &AttentionVars,
    gamma: f64,
) -> Result<Var> {
    check_same_shape(g, teacher.a_s, student.a_s, "spatial attention")?;
    check_same_shape(g, teacher.a_c, student.a_c, "channel attention")?;
    let mut l1 = |t: Var, s: Var| -> Result<Var> {
        let t = g.detach(t);
        let d = g.sub(t, s)?;
        let d = g.abs(d)?;
        g.mean_all(d)
    };
    let spatial = l1(teacher.a_s, student.a_s)?;
    let channel = l1(teacher.a_c, student.a_c)?;
    let sum = g.add(spatial, channel)?;
    g.scale(sum, T::of(gamma))
}

/// Adapter from student to teacher channels plus the shared global block.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillModule<T = f32> {
    params: ParamSet<T>,
    adapter: Option<(usize, usize)>,
    global: GlobalBlockParams,
    teacher_channels: usize,
    student_channels: usize,
}

/// Graph handles for a bound [`DistillModule`].
#[derive(Clone, Copy, Debug)]
pub struct DistillVars {
    pub adapter: Option<(Var, Var)>,
    pub global: GlobalVars,
}

impl<T: Scalar> DistillModule<T> {
    /// Identity adapter when channel counts match, otherwise a 1×1 conv.
    /// Adapter and global-block weights use separate streams derived from `seed`.
    pub fn build(teacher_channels: usize, student_channels: usize, seed: u64) -> Result<Self> {
        if teacher_channels == 0 || student_channels == 0 {
            return Err(Error::Config("distillation needs positive channel counts".into()));
        }
        let mut params = ParamSet::new();
        let adapter = (teacher_channels != student_channels).then(|| {
            let mut rng = stream(seed, "distill-adapter");
            let std = (2.0 / student_channels as f64).sqrt();
            let w = params.push(
                "adapter.weight",
                normal_tensor(&mut rng, &[teacher_channels, student_channels, 1, 1], std),
            );
            let b = params.push("adapter.bias", Tensor::zeros([teacher_channels]));
            (w, b)
        });
        let mut rng = stream(seed, "distill-global");
        let global = GlobalBlockParams::init(&mut params, teacher_channels, &mut rng);
        Ok(DistillModule {
            params,
            adapter,
            global,
            teacher_channels,
            student_channels,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn teacher_channels(&self) -> usize {
        self.teacher_channels
    }

    pub fn student_channels(&self) -> usize {
        self.student_channels
    }

    /// Interprets `vars` (from binding [`DistillModule::params`]).
    pub fn vars(&self, vars: &[Var]) -> DistillVars {
        DistillVars {
            adapter: self.adapter.map(|(w, b)| (vars[w], vars[b])),
            global: self.global.vars(vars),
        }
    }
}

/// `f(F_S)`: identity or a 1×1 conv to teacher channels.
pub fn adapt<T: Scalar>(g: &mut Graph<T>, f_s: Var, adapter: Option<(Var, Var)>) -> Result<Var> {
    match adapter {
        Some((w, b)) => g.conv2d(f_s, w, Some(b), ConvOpts::default()),
        None => Ok(f_s),
    }
}

/// Loss handles from [`total_distill_loss`]. A term whose weights are all zero
/// is not built and is reported as `None`.
#[derive(Clone, Debug)]
pub struct DistillOutput<T = f32> {
    pub feature: Option<FocalFeatureVars>,
    pub attention: Option<Var>,
    pub focal: Option<Var>,
    pub global: Option<Var>,
    pub total: Option<Var>,
    pub masks: Vec<MaskSet<T>>,
}

/// Scalar values of each term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillBreakdown {
    pub fea: f64,
    pub fea_fg: f64,
    pub fea_bg: f64,
    pub at: f64,
    pub focal: f64,
    pub global: f64,
    pub total: f64,
}

impl<T: Scalar> DistillOutput<T> {
    pub fn breakdown(&self, g: &Graph<T>) -> DistillBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.item(x).as_f64());
        DistillBreakdown {
            fea: v(self.feature.map(|f| f.total)),
            fea_fg: v(self.feature.map(|f| f.fg)),
            fea_bg: v(self.feature.map(|f| f.bg)),
            at: v(self.attention),
            focal: v(self.focal),
            global: v(self.global),
            total: v(self.total),
        }
    }
}

fn add_opt<T: Scalar>(g: &mut Graph<T>, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, b) => a.or(b),
    })
}

/// Focal (`L_fea + L_at`) and global terms between `N×C_T×H×W` teacher and
/// `N×C_S×H×W` student necks. `gt_cells[i]` holds image `i`'s boxes in neck
/// cell coordinates (see [`boxes_to_cells`]).
pub fn total_distill_loss<T: Scalar>(
    g: &mut Graph<T>,
    teacher_neck: Var,
    student_neck: Var,
    gt_cells: &[Vec<Xywh>],
    config: &DistillConfig,
    vars: &DistillVars,
) -> Result<DistillOutput<T>> {
    config.validate()?;
    let (ts, ss) = (g.shape(teacher_neck).to_vec(), g.shape(student_neck).to_vec());
    if ts.len() != 4 || ss.len() != 4 || ts[0] != ss[0] || ts[2..] != ss[2..] {
        return Err(Error::Dimension(format!(
            "teacher neck {ts:?} and student neck {ss:?} are not aligned"
        )));
    }
    if gt_cells.len() != ts[0] {
        return Err(Error::Dimension(format!(
            "{} box lists for batch of {}",
            gt_cells.len(),
            ts[0]
        )));
    }
    let (n, c, h, w) = (ts[0], ts[1], ts[2], ts[3]);
    let f_t = g.detach(teacher_neck);
    let t_att = attention_maps(g, f_t, config.temperature)?;
    let mut masks = Vec::with_capacity(n);
    for (b, boxes) in gt_cells.iter().enumerate() {
        let a_s = &g.value(t_att.a_s).data()[b * h * w..(b + 1) * h * w];
        let a_c = &g.value(t_att.a_c).data()[b * c..(b + 1) * c];
        masks.push(MaskSet {
            m: binary_mask(boxes, h, w),
            s: scale_mask(boxes, h, w),
            a_s: Tensor::new([h, w], a_s.to_vec())?,
            a_c: Tensor::new([c], a_c.to_vec())?,
        });
    }
    let mut out = DistillOutput {
        feature: None,
        attention: None,
        focal: None,
        global: None,
        total: None,
        masks,
    };
    if config.is_disabled() {
        return Ok(out);
    }
    let f_s = adapt(g, student_neck, vars.adapter)?;
    if g.shape(f_s) != g.shape(f_t) {
        return Err(Error::Dimension(format!(
            "adapted student {:?} does not match teacher {ts:?}",
            g.shape(f_s)
        )));
    }
    if config.alpha != 0.0 || config.beta != 0.0 {
        out.feature = Some(focal_feature_loss(g, f_t, f_s, &out.masks, config.alpha, config.beta)?);
    }
    if config.gamma != 0.0 {
        let s_att = attention_maps(g, f_s, config.temperature)?;
        out.attention = Some(attention_loss(g, &t_att, &s_att, config.gamma)?);
    }
    if config.lambda != 0.0 {
        out.global = Some(global_loss(g, f_t, f_s, &vars.global, config.lambda)?);
    }
    out.focal = add_opt(g, out.feature.map(|f| f.total), out.attention)?;
    out.total = add_opt(g, out.focal, out.global)?;
    Ok(out)
}
