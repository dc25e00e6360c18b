use rand::Rng;
use serde::{Deserialize, Serialize};

use super::normal;
use crate::imageproc::GrayImage;

/// Side length of every rendered image, before cropping.
pub const IMAGE_SIZE: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Sagittal = 0,
    Transverse = 1,
}

impl View {
    pub fn tag(self) -> &'static str {
        match self {
            View::Sagittal => "sag",
            View::Transverse => "trv",
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Squared normalized radius; < 1 inside.
    fn r2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

/// One ultrasound-like view. The kidney is a bright ellipse, the pelvis a
/// darker ellipse inside it whose size and darkness grow with
/// `0.5 + signal_strength·(severity − 0.5)`. Position, orientation and
/// aspect are jittered independently per call. A bright caption block sits
/// in the top-left corner, outside the default center crop.
pub fn render_view(view: View, severity: f64, signal_strength: f64, pixel_noise: f64, rng: &mut impl Rng) -> GrayImage {
    let e = (0.5 + signal_strength * (severity - 0.5)).clamp(0.0, 1.0);
    let (ka, kb) = match view {
        View::Sagittal => (100.0, 62.0),
        View::Transverse => (80.0, 68.0),
    };
    let c = IMAGE_SIZE as f64 / 2.0;
    let angle = rng.gen_range(-0.35..0.35);
    let kidney = Ellipse {
        cx: c + rng.gen_range(-12.0..12.0),
        cy: c + rng.gen_range(-12.0..12.0),
        a: ka * rng.gen_range(0.93..1.07),
        b: kb * rng.gen_range(0.93..1.07),
        cos: f64::cos(angle),
        sin: f64::sin(angle),
    };
    let scale = 0.15 + 0.6 * e;
    let pelvis = Ellipse {
        cx: kidney.cx + rng.gen_range(-4.0..4.0),
        cy: kidney.cy + rng.gen_range(-4.0..4.0),
        a: kidney.a * scale,
        b: kidney.b * scale * rng.gen_range(0.85..1.0),
        ..kidney
    };
    let pelvis_level = 95.0 - 55.0 * e;
    let tilt = rng.gen_range(-0.1..0.1);

    let mut pixels = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 55.0 + 25.0 * (yf / IMAGE_SIZE as f64) + tilt * (xf - c);
            let rk = kidney.r2(xf, yf);
            if rk < 1.0 {
                // soft rim so edges are not perfectly sharp
                v = 150.0 + 20.0 * (1.0 - rk);
            }
            let rp = pelvis.r2(xf, yf);
            if rp < 1.0 {
                v = pelvis_level;
            }
            if (6..14).contains(&y) && (6..70).contains(&x) {
                v = 235.0;
            }
            v += pixel_noise * normal(rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(IMAGE_SIZE, IMAGE_SIZE, pixels).expect("buffer matches size")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    fn dark_fraction(img: &GrayImage) -> f64 {
        let n = img.pixels().iter().filter(|&&p| p < 110).count();
        n as f64 / img.pixels().len() as f64
    }

    #[test]
    fn pelvis_grows_with_severity() {
        let lo = render_view(View::Sagittal, 0.1, 1.0, 0.0, &mut keyed_rng(1, &[]));
        let hi = render_view(View::Sagittal, 0.9, 1.0, 0.0, &mut keyed_rng(1, &[]));
        // background is also dark, so compare the center region only
        let center = |img: &GrayImage| {
            let c = crate::imageproc::center_crop(img, 120, 120).unwrap();
            dark_fraction(&c)
        };
        assert!(center(&hi) > center(&lo) + 0.2);
    }

    #[test]
    fn zero_signal_ignores_severity() {
        let a = render_view(View::Transverse, 0.0, 0.0, 5.0, &mut keyed_rng(3, &[]));
        let b = render_view(View::Transverse, 1.0, 0.0, 5.0, &mut keyed_rng(3, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn caption_lies_outside_default_crop() {
        let img = render_view(View::Sagittal, 0.5, 1.0, 0.0, &mut keyed_rng(2, &[]));
        assert_eq!(img.get(10, 10), 235);
        let cropped = crate::imageproc::center_crop(&img, 256, 256).unwrap();
        assert!(cropped.pixels().iter().all(|&p| p != 235));
    }
}
