//! Pixel gridworlds, a scripted expert, and observation-only expert datasets.

mod dataset;
mod expert;
mod grid;
mod sampling;

pub use dataset::{
    generate_expert_dataset, load_dataset, save_dataset, DatasetMeta, ExpertDataset, GenerationReport,
    DATASET_FORMAT_VERSION, DATASET_MAGIC,
};
pub use expert::scripted_expert_action;
pub use grid::{
    render, Action, Cell, EnvConfig, Geometry, GridEnv, GridState, StepOutcome, Task, AGENT_INTENSITY,
    GOAL_INTENSITY, WALL_INTENSITY,
};
pub use sampling::{sample_pair, sample_pair_indices, sample_window, sample_window_indices, PairIndex, WindowIndex};

/// One grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// `k` consecutive frames, oldest first, stored as `[k, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationState {
    frame_stack: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ObservationState {
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> Self {
        let mut data = Vec::new();
        let (mut h, mut w, mut k) = (0, 0, 0);
        for f in frames {
            h = f.height;
            w = f.width;
            k += 1;
            data.extend_from_slice(&f.pixels);
        }
        Self {
            frame_stack: k,
            height: h,
            width: w,
            data,
        }
    }

    pub fn frame_stack(&self) -> usize {
        self.frame_stack
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            height: self.height,
            width: self.width,
            frame_stack: self.frame_stack,
        }
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Intensities scaled to `[0, 1]`, appended to `out`.
    pub fn write_normalized(&self, out: &mut Vec<f64>) {
        out.extend(self.data.iter().map(|&v| v as f64 / 255.0));
    }
}

/// Newest frame of each state in temporal order; state `i` is rebuilt by
/// stacking frames `i-k+1..=i`, repeating frame 0 before the episode start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    frame_stack: usize,
    frames: Vec<Frame>,
    /// Expert actions, present only while generating; never persisted.
    actions: Option<Vec<Action>>,
}

impl Trajectory {
    pub fn new(frame_stack: usize, frames: Vec<Frame>) -> crate::Result<Self> {
        if frames.len() < 2 {
            return Err(crate::Error::Dataset(format!(
                "trajectory needs at least 2 states, got {}",
                frames.len()
            )));
        }
        if frame_stack == 0 {
            return Err(crate::Error::Dataset("frame stack must be positive".into()));
        }
        let (h, w) = (frames[0].height, frames[0].width);
        if frames.iter().any(|f| f.height != h || f.width != w || f.pixels.len() != h * w) {
            return Err(crate::Error::GeometryMismatch("frames within a trajectory differ in size".into()));
        }
        Ok(Self {
            frame_stack,
            frames,
            actions: None,
        })
    }

    pub(crate) fn with_actions(mut self, actions: Vec<Action>) -> Self {
        self.actions = Some(actions);
        self
    }

    pub fn actions(&self) -> Option<&[Action]> {
        self.actions.as_deref()
    }

    /// Copy with annotations removed.
    pub fn observations_only(&self) -> Self {
        Self {
            actions: None,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame_stack(&self) -> usize {
        self.frame_stack
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            height: self.frames[0].height,
            width: self.frames[0].width,
            frame_stack: self.frame_stack,
        }
    }

    pub fn state(&self, i: usize) -> ObservationState {
        let k = self.frame_stack;
        ObservationState::from_frames((0..k).map(|s| &self.frames[(i + s + 1).saturating_sub(k)]))
    }

    /// Normalized pixels of state `i`, appended to `out`.
    pub fn write_state(&self, i: usize, out: &mut Vec<f64>) {
        let k = self.frame_stack;
        for s in 0..k {
            let f = &self.frames[(i + s + 1).saturating_sub(k)];
            out.extend(f.pixels.iter().map(|&v| v as f64 / 255.0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: u8) -> Frame {
        Frame {
            height: 2,
            width: 2,
            pixels: vec![v; 4],
        }
    }

    #[test]
    fn consecutive_states_overlap_in_k_minus_one_frames() {
        let t = Trajectory::new(3, (0..6).map(frame).collect()).unwrap();
        for i in 0..5 {
            let (a, b) = (t.state(i), t.state(i + 1));
            for f in 0..2 {
                assert_eq!(a.frame(f + 1), b.frame(f));
            }
        }
        // Episode start replicates the first frame.
        assert_eq!(t.state(0).bytes(), &[0u8; 12][..]);
        assert_eq!(t.state(1).frame(2), &[1u8; 4][..]);
    }

    #[test]
    fn short_trajectories_rejected() {
        assert!(Trajectory::new(4, vec![frame(0)]).is_err());
    }
}
