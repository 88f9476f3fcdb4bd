use std::f64::consts::{PI, TAU};

use super::{DEFAULT_FPS, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Fixed label vocabulary. Index 0 is the null label used for guidance.
pub struct Vocab;

impl Vocab {
    pub const LABELS: [&'static str; 4] = ["∅", "walk", "wave", "circle"];
    pub const NULL: usize = 0;

    pub fn len() -> usize {
        Self::LABELS.len()
    }

    /// Non-null labels in index order.
    pub fn classes() -> &'static [&'static str] {
        &Self::LABELS[1..]
    }

    pub fn index(label: &str) -> Result<usize> {
        Self::LABELS
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown label `{label}`; vocabulary is {}",
                    Self::classes().join(", ")
                ))
            })
    }

    pub fn class_index(label: &str) -> Result<usize> {
        match Self::index(label)? {
            Self::NULL => Err(Error::contract("the null label cannot be generated")),
            i => Ok(i),
        }
    }

    pub fn name(index: usize) -> Result<&'static str> {
        Self::LABELS
            .get(index)
            .copied()
            .ok_or_else(|| Error::contract(format!("label index {index} out of range")))
    }
}

/// Absolute joint positions `[frames, joints, 3]` in meters, y up.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub fps: u32,
    pub label: String,
    pub frames: Tensor<f32>,
}

impl MotionSequence {
    pub fn new(fps: u32, label: impl Into<String>, frames: Tensor<f32>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 3 || s[1] != NUM_JOINTS || s[2] != 3 {
            return Err(Error::contract(format!(
                "motion frames must be [T, {NUM_JOINTS}, 3], got {s:?}"
            )));
        }
        Ok(Self {
            fps,
            label: label.into(),
            frames,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [f32; 3] {
        let b = (frame * NUM_JOINTS + joint) * 3;
        let d = self.frames.data();
        [d[b], d[b + 1], d[b + 2]]
    }
}

const ROOT_HEIGHT: f64 = 0.9;
const STEP_HZ: f64 = 1.5;
const WAVE_HZ: f64 = 1.0;

fn jitter(rng: &mut Rng) -> f64 {
    rng.uniform_in(0.8, 1.2)
}

/// Deterministic procedural motion for `(label, seed)`.
///
/// Every sequence gets a random ground-plane placement of up to 0.5 m per
/// axis, then amplitude and phase jitter of up to 20%.
pub fn gen_synthetic(label: &str, seed: u64, frames: usize) -> Result<MotionSequence> {
    let class = Vocab::class_index(label)?;
    if frames < 16 {
        return Err(Error::contract(format!(
            "need at least 16 frames, got {frames}"
        )));
    }
    let mut rng = Rng::new(seed);
    let (x0, z0) = (rng.uniform_in(-0.5, 0.5), rng.uniform_in(-0.5, 0.5));
    let amp = jitter(&mut rng);
    let phase = rng.uniform_in(-0.2, 0.2) * PI;
    let dt = 1.0 / DEFAULT_FPS as f64;
    let w_step = TAU * STEP_HZ;
    let mut data = Vec::with_capacity(frames * NUM_JOINTS * 3);
    for f in 0..frames {
        let t = f as f64 * dt;
        // Root position, heading (unit forward in the ground plane), gait phase.
        let (root, heading, gait) = match class {
            1 => (
                [
                    x0 + t,
                    ROOT_HEIGHT + 0.02 * amp * (2.0 * (w_step * t + phase)).sin(),
                    z0,
                ],
                [1.0, 0.0],
                Some(w_step * t + phase),
            ),
            2 => ([x0, ROOT_HEIGHT, z0], [1.0, 0.0], None),
            _ => {
                // One lap over the standard 64-frame clip.
                let th = phase + TAU * t / 3.2;
                (
                    [x0 + th.cos(), ROOT_HEIGHT, z0 + th.sin()],
                    [-th.sin(), th.cos()],
                    Some(w_step * t + phase),
                )
            }
        };
        let side = [-heading[1], heading[0]];
        let place = |fwd: f64, up: f64, lat: f64| {
            [
                root[0] + fwd * heading[0] + lat * side[0],
                root[1] + up,
                root[2] + fwd * heading[1] + lat * side[1],
            ]
        };
        let joints = match gait {
            Some(g) => {
                let s = g.sin();
                [
                    root,
                    place(-0.2 * amp * s, 0.1, 0.25),
                    place(0.2 * amp * s, 0.1, -0.25),
                    place(0.25 * amp * s, -0.85 + 0.06 * amp * s.max(0.0), 0.1),
                    place(-0.25 * amp * s, -0.85 + 0.06 * amp * (-s).max(0.0), -0.1),
                ]
            }
            None => {
                let w = (TAU * WAVE_HZ * t + phase).sin();
                [
                    root,
                    place(0.0, 0.1, 0.25),
                    place(0.1, 0.6 + 0.25 * amp * w, -0.3 - 0.1 * amp * w),
                    place(0.0, -0.85, 0.1),
                    place(0.0, -0.85, -0.1),
                ]
            }
        };
        for j in joints {
            data.extend(j.iter().map(|&c| c as f32));
        }
    }
    MotionSequence::new(
        DEFAULT_FPS,
        label,
        Tensor::new(vec![frames, NUM_JOINTS, 3], data)?,
    )
}

/// Masked per-frame, per-joint target positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSignal {
    /// `[frames, joints]`, row-major.
    pub mask: Vec<bool>,
    /// `[frames, joints, 3]`.
    pub targets: Tensor<f32>,
}

impl ControlSignal {
    pub fn new(mask: Vec<bool>, targets: Tensor<f32>) -> Result<Self> {
        let s = targets.shape();
        if s.len() != 3 || s[1] != NUM_JOINTS || s[2] != 3 || mask.len() != s[0] * NUM_JOINTS {
            return Err(Error::contract(format!(
                "signal targets {s:?} and mask of {} entries disagree with the skeleton",
                mask.len()
            )));
        }
        for (i, &m) in mask.iter().enumerate() {
            if m && !targets.data()[i * 3..i * 3 + 3]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(Error::contract(format!("masked target {i} is not finite")));
            }
        }
        Ok(Self { mask, targets })
    }

    /// Empty mask over `frames`.
    pub fn empty(frames: usize) -> Self {
        Self {
            mask: vec![false; frames * NUM_JOINTS],
            targets: Tensor::zeros(vec![frames, NUM_JOINTS, 3]),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_set(&self, frame: usize, joint: usize) -> bool {
        self.mask[frame * NUM_JOINTS + joint]
    }
}

/// Joint subsets used to synthesize training signals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPattern {
    Root,
    RightHand,
    RootAndFeet,
}

impl MaskPattern {
    pub const ALL: [MaskPattern; 3] = [Self::Root, Self::RightHand, Self::RootAndFeet];

    pub fn joints(self) -> &'static [usize] {
        match self {
            Self::Root => &[0],
            Self::RightHand => &[2],
            Self::RootAndFeet => &[0, 3, 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Root => "root",
            Self::RightHand => "right_hand",
            Self::RootAndFeet => "root_feet",
        }
    }
}

/// Signal taken from a ground-truth motion on every `stride`-th frame.
pub fn make_signal(m: &MotionSequence, pattern: MaskPattern, stride: usize) -> ControlSignal {
    let frames = m.num_frames();
    let mut mask = vec![false; frames * NUM_JOINTS];
    for f in (0..frames).step_by(stride.max(1)) {
        for &j in pattern.joints() {
            mask[f * NUM_JOINTS + j] = true;
        }
    }
    let targets = Tensor::new(
        m.frames.shape().to_vec(),
        m.frames
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i / 3] { v } else { 0.0 })
            .collect(),
    )
    .expect("same shape");
    ControlSignal { mask, targets }
}
