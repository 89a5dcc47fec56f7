use super::{Color, Scene, SceneObject, SceneSpec, Shape, Size};

/// Palette, indexed by `Color as usize`. Every component is a multiple of
/// 1/8 so it survives an `f32` round trip exactly.
pub const COLOR_RGB: [[f64; 3]; 6] = [
    [0.875, 0.125, 0.125],
    [0.125, 0.75, 0.25],
    [0.125, 0.25, 0.875],
    [0.875, 0.875, 0.125],
    [0.625, 0.125, 0.75],
    [1.0, 0.5, 0.0],
];

/// Rasterized scene: `H x W x 3` row-major image plus one mask per object
/// (same order as `scene.objects`).
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    pub image: Vec<f64>,
    pub masks: Vec<Vec<bool>>,
}

pub fn color_rgb(c: Color) -> [f64; 3] {
    COLOR_RGB[c as usize]
}

/// Half-extent in pixels for an object in a cell of side `cell`.
pub(crate) fn radius(size: Size, cell: usize) -> f64 {
    match size {
        Size::Small => cell as f64 / 4.0,
        Size::Large => cell as f64 * 7.0 / 16.0,
    }
}

/// Point test in cell-centred coordinates (y grows downward).
fn covers(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        Shape::Cross => {
            (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
        }
        Shape::Diamond => dx.abs() + dy.abs() <= r,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.25 * r * r
        }
    }
}

fn object_mask(obj: &SceneObject, spec: &SceneSpec) -> Vec<bool> {
    let (ch, cw) = (spec.cell_height(), spec.cell_width());
    let (y0, x0) = ((obj.cell / spec.cols) * ch, (obj.cell % spec.cols) * cw);
    let r = radius(obj.size, ch.min(cw));
    let mut mask = vec![false; spec.height * spec.width];
    for y in y0..y0 + ch {
        let dy = (y - y0) as f64 + 0.5 - ch as f64 / 2.0;
        for x in x0..x0 + cw {
            let dx = (x - x0) as f64 + 0.5 - cw as f64 / 2.0;
            if covers(obj.shape, dx, dy, r) {
                mask[y * spec.width + x] = true;
            }
        }
    }
    mask
}

/// Antialias-free rasterization. Objects never overlap (one per cell), and
/// painting happens in cell order, so object list order is irrelevant.
pub fn render(scene: &Scene, spec: &SceneSpec) -> Rendering {
    let bg = spec.backgrounds[scene.background % spec.backgrounds.len()];
    let npx = spec.height * spec.width;
    let mut image = Vec::with_capacity(npx * 3);
    for _ in 0..npx {
        image.extend_from_slice(&bg);
    }
    let masks: Vec<Vec<bool>> = scene.objects.iter().map(|o| object_mask(o, spec)).collect();
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by_key(|&i| scene.objects[i].cell);
    for i in order {
        let rgb = color_rgb(scene.objects[i].color);
        for (p, _) in masks[i].iter().enumerate().filter(|(_, &m)| m) {
            image[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
    }
    Rendering { image, masks }
}
