use rayon::prelude::*;

use super::{Manifest, VisitSequence};
use crate::error::Result;
use crate::imageproc::read_pgm;
use crate::network::ViewPair;

/// A kidney sequence with its preprocessed images in memory.
#[derive(Clone, Debug)]
pub struct LoadedSequence {
    /// `patient/side`.
    pub key: String,
    pub patient_id: String,
    pub label: bool,
    pub visits: Vec<ViewPair>,
}

impl LoadedSequence {
    /// The sequence cut down to one visit.
    pub fn only_visit(&self, index: usize) -> LoadedSequence {
        LoadedSequence {
            visits: vec![self.visits[index].clone()],
            ..self.clone()
        }
    }

    pub fn first(&self) -> LoadedSequence {
        self.only_visit(0)
    }

    pub fn latest(&self) -> LoadedSequence {
        self.only_visit(self.visits.len() - 1)
    }
}

/// Reads and preprocesses every image of every sequence, resizing to
/// `input_size`. The crop and CLAHE settings come from the manifest header.
pub fn load_sequences(manifest: &Manifest, input_size: usize) -> Result<Vec<LoadedSequence>> {
    let mut pre = manifest.header.preprocess.clone();
    pre.output_size = input_size;
    pre.validate()?;
    manifest
        .sequences()
        .into_par_iter()
        .map(|seq: VisitSequence| {
            let visits = seq
                .records
                .iter()
                .map(|r| {
                    Ok(ViewPair {
                        sagittal: pre.to_tensor(&read_pgm(&manifest.resolve(&r.sagittal_path))?)?,
                        transverse: pre.to_tensor(&read_pgm(&manifest.resolve(&r.transverse_path))?)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LoadedSequence {
                key: seq.key(),
                patient_id: seq.patient_id,
                label: seq.label == 1,
                visits,
            })
        })
        .collect()
}
