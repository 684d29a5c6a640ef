//! In-memory form of a multi-camera observation sequence.
//!
//! Both the simulator and the track-file reader produce a [`Dataset`], so
//! simulated and ingested runs go through the same pipeline path.

use nalgebra::Vector2;

use crate::descriptor::Descriptor;
use crate::geometry::Pose;

/// One feature observation: a tracked pixel in one camera at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub frame: usize,
    pub camera: usize,
    pub track_id: u64,
    pub pixel: Vector2<f64>,
    pub descriptor: Option<Descriptor>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub num_frames: usize,
    pub frame_rate: f64,
    /// Sorted by `(frame, camera, track_id)`.
    pub observations: Vec<Observation>,
    /// Ground-truth body pose per frame, when known.
    pub ground_truth: Vec<Option<Pose>>,
}

impl Dataset {
    pub fn new(frame_rate: f64, mut observations: Vec<Observation>, ground_truth: Vec<Option<Pose>>) -> Self {
        observations.sort_by(|a, b| {
            (a.frame, a.camera, a.track_id).cmp(&(b.frame, b.camera, b.track_id))
        });
        let num_frames = observations
            .last()
            .map(|o| o.frame + 1)
            .unwrap_or(0)
            .max(ground_truth.len());
        let mut ground_truth = ground_truth;
        ground_truth.resize(num_frames, None);
        Self {
            num_frames,
            frame_rate,
            observations,
            ground_truth,
        }
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 / self.frame_rate
    }

    /// Observations grouped per frame; index `f` holds the slice for frame `f`.
    pub fn frames(&self) -> Vec<&[Observation]> {
        let mut out = Vec::with_capacity(self.num_frames);
        let mut start = 0;
        for f in 0..self.num_frames {
            let mut end = start;
            while end < self.observations.len() && self.observations[end].frame == f {
                end += 1;
            }
            out.push(&self.observations[start..end]);
            start = end;
        }
        out
    }

    pub fn num_cameras(&self) -> usize {
        self.observations.iter().map(|o| o.camera + 1).max().unwrap_or(0)
    }

    /// Keeps only the listed cameras and renumbers them `0..cameras.len()`.
    pub fn select_cameras(&self, cameras: &[usize]) -> Dataset {
        let observations = self
            .observations
            .iter()
            .filter_map(|o| {
                cameras.iter().position(|&c| c == o.camera).map(|new| Observation {
                    camera: new,
                    ..o.clone()
                })
            })
            .collect();
        let mut ds = Dataset::new(self.frame_rate, observations, self.ground_truth.clone());
        ds.num_frames = ds.num_frames.max(self.num_frames);
        ds.ground_truth.resize(ds.num_frames, None);
        ds
    }

    /// Every descriptor carried by the dataset, in observation order.
    pub fn descriptors(&self) -> Vec<Descriptor> {
        self.observations.iter().filter_map(|o| o.descriptor).collect()
    }
}
