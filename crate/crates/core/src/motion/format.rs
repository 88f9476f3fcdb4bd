//! Motion and control-signal JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{ControlSignal, MotionSequence};
use super::{DEFAULT_FPS, JOINTS, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Serialize, Deserialize)]
struct MotionFile {
    #[serde(default = "default_fps")]
    fps: u32,
    joints: Vec<String>,
    label: String,
    frames: Vec<Vec<Vec<f32>>>,
}

fn default_fps() -> u32 {
    DEFAULT_FPS
}

#[derive(Serialize, Deserialize)]
struct SignalFile {
    mask: Vec<Vec<bool>>,
    targets: Vec<Vec<Vec<f32>>>,
}

fn nest(t: &Tensor<f32>) -> Vec<Vec<Vec<f32>>> {
    t.data()
        .chunks(NUM_JOINTS * 3)
        .map(|f| f.chunks(3).map(|p| p.to_vec()).collect())
        .collect()
}

fn flat(field: &str, frames: &[Vec<Vec<f32>>]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(frames.len() * NUM_JOINTS * 3);
    for (i, f) in frames.iter().enumerate() {
        if f.len() != NUM_JOINTS {
            return Err(Error::format(
                format!("{field}[{i}]"),
                format!("expected {NUM_JOINTS} joints, found {}", f.len()),
            ));
        }
        for (j, p) in f.iter().enumerate() {
            if p.len() != 3 {
                return Err(Error::format(
                    format!("{field}[{i}][{j}]"),
                    format!("expected 3 coordinates, found {}", p.len()),
                ));
            }
            data.extend_from_slice(p);
        }
    }
    Tensor::new(vec![frames.len(), NUM_JOINTS, 3], data)
}

pub fn motion_to_json(m: &MotionSequence) -> String {
    let file = MotionFile {
        fps: m.fps,
        joints: JOINTS.iter().map(|s| s.to_string()).collect(),
        label: m.label.clone(),
        frames: nest(&m.frames),
    };
    serde_json::to_string(&file).expect("motion serializes")
}

pub fn motion_from_json(text: &str) -> Result<MotionSequence> {
    let file: MotionFile = serde_json::from_str(text)?;
    if file.joints.len() != NUM_JOINTS {
        return Err(Error::format(
            "joints",
            format!("expected {NUM_JOINTS} joints, found {}", file.joints.len()),
        ));
    }
    for (i, (got, want)) in file.joints.iter().zip(JOINTS).enumerate() {
        if got != want {
            return Err(Error::format(
                format!("joints[{i}]"),
                format!("expected `{want}`, found `{got}`"),
            ));
        }
    }
    let frames = flat("frames", &file.frames)?;
    if !frames
        .data()
        .iter()
        .all(|v| v.is_finite() && v.abs() < 100.0)
    {
        return Err(Error::format(
            "frames",
            "coordinates must be finite with |c| < 100",
        ));
    }
    MotionSequence::new(file.fps, file.label, frames)
}

pub fn save_motion(path: &Path, m: &MotionSequence) -> Result<()> {
    fs::write(path, motion_to_json(m)).map_err(|e| Error::io(path, e))
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    motion_from_json(&text)
}

pub fn signal_to_json(s: &ControlSignal) -> String {
    let file = SignalFile {
        mask: s.mask.chunks(NUM_JOINTS).map(|c| c.to_vec()).collect(),
        targets: nest(&s.targets),
    };
    serde_json::to_string(&file).expect("signal serializes")
}

pub fn signal_from_json(text: &str) -> Result<ControlSignal> {
    let file: SignalFile = serde_json::from_str(text)?;
    let targets = flat("targets", &file.targets)?;
    if file.mask.len() != file.targets.len() {
        return Err(Error::format(
            "mask",
            format!(
                "{} frames, targets have {}",
                file.mask.len(),
                file.targets.len()
            ),
        ));
    }
    let mut mask = Vec::with_capacity(file.mask.len() * NUM_JOINTS);
    for (i, row) in file.mask.iter().enumerate() {
        if row.len() != NUM_JOINTS {
            return Err(Error::format(
                format!("mask[{i}]"),
                format!("expected {NUM_JOINTS} joints, found {}", row.len()),
            ));
        }
        mask.extend_from_slice(row);
    }
    ControlSignal::new(mask, targets)
}

pub fn save_signal(path: &Path, s: &ControlSignal) -> Result<()> {
    fs::write(path, signal_to_json(s)).map_err(|e| Error::io(path, e))
}

pub fn load_signal(path: &Path) -> Result<ControlSignal> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    signal_from_json(&text)
}
