use super::{critic_features, local_jerk, point_error, softmax5, CopilotError, PointInput, Result, Track};
use crate::kinematics::KIN_DIMS;
use crate::model::Decoder;
use crate::train::{predict_set, PreparedTrial, WindowSet};

/// Decoder and classifier outputs for every window of a set.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedSet {
    pub outputs: Vec<[f64; KIN_DIMS]>,
    pub latents: Vec<Vec<f64>>,
    pub posteriors: Vec<[f64; 5]>,
    /// Local jerk along each trial's decoded sequence.
    pub jerk: Vec<f64>,
    pub truth: Vec<[f64; KIN_DIMS]>,
    pub trial: Vec<usize>,
    pub target_index: Vec<usize>,
}

impl DecodedSet {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn critic_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| critic_features(&self.latents[i], &self.posteriors[i], self.jerk[i]))
            .collect()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.outputs.iter().zip(&self.truth).map(|(p, t)| point_error(p, t)).collect()
    }

    /// Splits the set into per-trial tracks, attaching `confidence` and the
    /// sensor events at each target sample of `trials`.
    pub fn tracks(&self, confidence: &[f64], trials: &[PreparedTrial]) -> Result<Vec<Track>> {
        if confidence.len() != self.len() {
            return Err(CopilotError::Input(format!(
                "{} confidences for {} points",
                confidence.len(),
                self.len()
            )));
        }
        let mut tracks: Vec<(usize, Track)> = Vec::new();
        for i in 0..self.len() {
            let t = self.trial[i];
            let trial = trials
                .get(t)
                .ok_or_else(|| CopilotError::Input(format!("window {i} refers to missing trial {t}")))?;
            let ev = trial
                .events
                .as_ref()
                .ok_or_else(|| CopilotError::Input(format!("trial {} has no sensor events", trial.id)))?;
            let k = self.target_index[i];
            let sensors = [ev.contact_force[k], ev.object_height[k], ev.object_vz[k], ev.trial_end[k]];
            if tracks.last().map_or(true, |(id, _)| *id != t) {
                tracks.push((
                    t,
                    Track {
                        points: Vec::new(),
                        truth: Vec::new(),
                    },
                ));
            }
            let track = &mut tracks.last_mut().expect("pushed above").1;
            track.points.push(PointInput {
                index: k,
                output: self.outputs[i],
                posterior: self.posteriors[i],
                confidence: confidence[i],
                sensors,
            });
            track.truth.push(self.truth[i]);
        }
        Ok(tracks.into_iter().map(|(_, t)| t).collect())
    }
}

/// Runs the regressor and the state classifier over `set`.
pub fn decode_set(decoder: &Decoder, classifier: &Decoder, set: &WindowSet, batch: usize) -> Result<DecodedSet> {
    if decoder.config.out_dim != KIN_DIMS || classifier.config.out_dim != 5 {
        return Err(CopilotError::Input(format!(
            "expected a 6-output decoder and a 5-class classifier, got {} and {}",
            decoder.config.out_dim, classifier.config.out_dim
        )));
    }
    let reg = predict_set(decoder, set, batch)?;
    let cls = predict_set(classifier, set, batch)?;
    let n = set.len();
    let d = reg.latent.shape()[1];
    let outputs: Vec<[f64; KIN_DIMS]> = reg
        .output
        .data()
        .chunks_exact(KIN_DIMS)
        .map(|c| c.try_into().expect("six outputs"))
        .collect();
    let posteriors = cls.output.data().chunks_exact(5).map(softmax5).collect::<Result<Vec<_>>>()?;
    let latents = reg.latent.data().chunks_exact(d).map(<[f64]>::to_vec).collect();
    let mut jerk = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && set.trial[end] == set.trial[start] {
            end += 1;
        }
        jerk[start..end].copy_from_slice(&local_jerk(&outputs[start..end]));
        start = end;
    }
    let truth = (0..n).map(|i| set.target(i).try_into().expect("six targets")).collect();
    Ok(DecodedSet {
        outputs,
        latents,
        posteriors,
        jerk,
        truth,
        trial: set.trial.clone(),
        target_index: set.target_index.clone(),
    })
}
