//! Renders a synthetic sagittal view, runs crop, CLAHE and resize, and writes
//! each stage as a PGM under the given directory (default: a temp dir).

use multivisit::imageproc::{center_crop, clahe, resize_bilinear, write_pgm, PreprocessConfig};
use multivisit::synthdata::{render_view, View};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> multivisit::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("multivisit-preprocess"));
    std::fs::create_dir_all(&out).expect("output dir");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let raw = render_view(View::Sagittal, 0.8, 1.0, 6.0, &mut rng);
    let cfg = PreprocessConfig::with_output_size(64);
    let cropped = center_crop(&raw, cfg.crop_width, cfg.crop_height)?;
    let equalized = clahe(&cropped, cfg.clahe)?;
    let resized = resize_bilinear(&equalized, cfg.output_size, cfg.output_size)?;
    assert_eq!(resized, cfg.apply(&raw)?);

    for (name, img) in [("raw", &raw), ("cropped", &cropped), ("clahe", &equalized), ("resized", &resized)] {
        let mean = img.pixels().iter().map(|&p| p as f64).sum::<f64>() / img.pixels().len() as f64;
        let path = out.join(format!("{name}.pgm"));
        write_pgm(&path, img)?;
        println!("{name:>8}: {}x{} mean {mean:6.1} -> {}", img.width(), img.height(), path.display());
    }
    let tensor = cfg.to_tensor(&raw)?;
    println!("model input shape {:?}", tensor.shape());
    Ok(())
}
