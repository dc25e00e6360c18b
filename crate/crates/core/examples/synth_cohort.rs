//! Generates a small cohort, splits it by patient, and prints the visit
//! histogram of each side.

use multivisit::synthdata::{generate_cohort, histogram_csv, split_by_patient, visit_histogram, Manifest, Preset};

fn main() -> multivisit::Result<()> {
    let dir = tempfile_dir("multivisit-cohort");
    let spec = Preset::InternalTest.spec(40, 11);
    let manifest = Manifest::read(&generate_cohort(&spec, &dir)?)?;
    println!(
        "{} patients, {} sequences, {} visits in {}",
        manifest.patients().len(),
        manifest.sequences().len(),
        manifest.len(),
        dir.display()
    );
    let (train, test) = split_by_patient(&manifest, 0.7, 1)?;
    for (name, m) in [("train", &train), ("test", &test)] {
        println!("\n{name}: {} patients\n{}", m.patients().len(), histogram_csv(&visit_histogram(m)));
    }
    Ok(())
}

fn tempfile_dir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}
