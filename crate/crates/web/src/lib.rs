//! Browser bindings: draw a synthetic page, look at the spatial attention
//! and foreground mask a freshly initialised student assigns it, and plot the
//! activation functions.

use edoc_core::backbone::{Model, ModelSpec};
use edoc_core::dataset::{category_name, synth_page, Letterbox, Profile};
use edoc_core::distill::{attention_tensors, binary_mask, boxes_to_cells};
use edoc_core::tensor::{Activation, Graph, Tensor};
use wasm_bindgen::prelude::*;

/// Network input side used for the attention view.
const INPUT: u32 = 128;

fn js_err(e: edoc_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn profile(balanced: bool) -> Profile {
    if balanced {
        Profile::Balanced
    } else {
        Profile::Desk
    }
}

/// A generated page: 8-bit grey pixels plus `[category, x, y, w, h]` boxes.
#[wasm_bindgen]
pub struct Page {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    boxes: Vec<f64>,
    names: Vec<String>,
}

#[wasm_bindgen]
impl Page {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Row-major grey values.
    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }

    /// RGBA bytes ready for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|&v| [v, v, v, 255]).collect()
    }

    /// Flattened `[category, x, y, w, h]` records.
    pub fn boxes(&self) -> Vec<f64> {
        self.boxes.clone()
    }

    /// Category name of box `i`.
    pub fn label(&self, i: usize) -> Option<String> {
        self.names.get(i).cloned()
    }
}

fn make_page(seed: u64, size: u32, balanced: bool) -> edoc_core::Result<Page> {
    let rec = synth_page(seed, size, size, profile(balanced))?;
    let boxes = rec
        .annotations
        .iter()
        .flat_map(|a| [a.category_id as f64, a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]])
        .collect();
    let names = rec
        .annotations
        .iter()
        .map(|a| category_name(a.category_id).unwrap_or("?").to_string())
        .collect();
    Ok(Page {
        width: rec.width,
        height: rec.height,
        pixels: rec.pixels.unwrap_or_default(),
        boxes,
        names,
    })
}

/// Synthetic page `seed`, `size`×`size`, with the desk or balanced
/// category mix.
#[wasm_bindgen(js_name = synthPage)]
pub fn synth(seed: u32, size: u32, balanced: bool) -> Result<Page, JsError> {
    make_page(seed as u64, size, balanced).map_err(js_err)
}

/// Spatial attention `A_S` and foreground mask `M` on the neck grid.
#[wasm_bindgen]
pub struct AttentionView {
    rows: usize,
    cols: usize,
    attention: Vec<f32>,
    mask: Vec<f32>,
}

#[wasm_bindgen]
impl AttentionView {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `A_S`, row-major; sums to `rows·cols`.
    pub fn attention(&self) -> Vec<f32> {
        self.attention.clone()
    }

    /// 1 on cells claimed by a box, 0 elsewhere.
    pub fn mask(&self) -> Vec<f32> {
        self.mask.clone()
    }
}

fn make_attention(seed: u64, balanced: bool, temperature: f64, model_seed: u64) -> edoc_core::Result<AttentionView> {
    let page = synth_page(seed, INPUT, INPUT, profile(balanced))?;
    let model = Model::<f32>::build(ModelSpec::student(), model_seed)?;
    let stride = model.spec().total_stride();
    let lb = Letterbox::new(page.width, page.height, INPUT, INPUT);
    let ink = lb.apply_image(page.pixels.as_deref().unwrap_or_default())?;
    let side = INPUT as usize;
    let mut g = Graph::<f32>::new();
    let vars = model.params().bind_frozen(&mut g);
    let x = g.constant(Tensor::new([1, 1, side, side], ink)?);
    let out = model.forward(&mut g, &vars, x)?;
    let neck = g.value(out.neck);
    let (c, rows, cols) = (neck.shape()[1], neck.shape()[2], neck.shape()[3]);
    let feat = neck.clone().reshape([c, rows, cols])?;
    let (_, _, a_s, _) = attention_tensors(&feat, temperature)?;
    let frame: Vec<_> = page.annotations.iter().filter_map(|a| lb.forward(&a.bbox)).collect();
    let mask: Tensor<f32> = binary_mask(&boxes_to_cells(&frame, stride, rows, cols), rows, cols);
    Ok(AttentionView {
        rows,
        cols,
        attention: a_s.data().to_vec(),
        mask: mask.data().to_vec(),
    })
}

/// Attention of an untrained student (weights from `model_seed`) over page
/// `seed` at temperature `temperature`.
#[wasm_bindgen(js_name = attentionView)]
pub fn attention(seed: u32, balanced: bool, temperature: f64, model_seed: u32) -> Result<AttentionView, JsError> {
    make_attention(seed as u64, balanced, temperature, model_seed as u64).map_err(js_err)
}

fn parse_activation(name: &str) -> Option<Activation> {
    match name {
        "relu" => Some(Activation::Relu),
        "sigmoid" => Some(Activation::Sigmoid),
        "h_swish" => Some(Activation::HSwish),
        _ => None,
    }
}

/// `n` samples of an activation (`relu`, `sigmoid`, `h_swish`) on `[lo, hi]`.
#[wasm_bindgen(js_name = activationCurve)]
pub fn activation_curve(name: &str, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
    let act = parse_activation(name).ok_or_else(|| JsError::new(&format!("unknown activation {name:?}")))?;
    if n < 2 || !(hi > lo) {
        return Err(JsError::new("need n ≥ 2 and hi > lo"));
    }
    Ok((0..n)
        .map(|i| act.apply(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn page_has_boxes_and_pixels() {
        let p = make_page(3, 128, false).unwrap();
        assert_eq!(p.pixels.len(), 128 * 128);
        assert_eq!(p.rgba().len(), 4 * 128 * 128);
        assert!(!p.boxes.is_empty() && p.boxes.len() % 5 == 0);
        assert_eq!(p.names.len(), p.boxes.len() / 5);
    }

    #[test]
    fn attention_sums_to_cell_count() {
        let v = make_attention(1, false, 0.5, 0).unwrap();
        let n = (v.rows * v.cols) as f32;
        let sum: f32 = v.attention.iter().sum();
        assert!((sum - n).abs() < 1e-3 * n);
        assert!(v.mask.iter().any(|&m| m == 1.0));
    }

    #[test]
    fn high_temperature_flattens_attention() {
        let spread = |t| {
            let v = make_attention(2, false, t, 0).unwrap();
            v.attention.iter().fold(0f32, |m, &a| m.max((a - 1.0).abs()))
        };
        assert!(spread(100.0) < spread(0.1));
    }

    #[test]
    fn curves_hit_known_points() {
        let act = |name| parse_activation(name).unwrap();
        assert_eq!(act("h_swish").apply(3.0f64), 3.0);
        assert_eq!(act("h_swish").apply(-3.0f64), 0.0);
        assert_eq!(act("relu").apply(-1.0f64), 0.0);
        assert!((act("sigmoid").apply(0.0f64) - 0.5).abs() < 1e-12);
        assert!(parse_activation("gelu").is_none());
    }
}
