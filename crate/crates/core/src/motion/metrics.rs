use super::corpus::Centroids;
use super::synth::{ControlSignal, MotionSequence, Vocab};
use crate::error::{Error, Result};

/// All coordinates of a motion as one vector.
pub fn flatten(m: &MotionSequence) -> Vec<f64> {
    m.frames.data().iter().map(|&v| v as f64).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean Euclidean distance in meters over the masked (frame, joint) pairs.
pub fn trajectory_error(generated: &MotionSequence, signal: &ControlSignal) -> Result<f64> {
    if generated.frames.shape() != signal.targets.shape() {
        return Err(Error::contract(format!(
            "motion {:?} and signal {:?} differ in shape",
            generated.frames.shape(),
            signal.targets.shape()
        )));
    }
    let (g, t) = (generated.frames.data(), signal.targets.data());
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, _) in signal.mask.iter().enumerate().filter(|(_, &m)| m) {
        let d: f64 = (0..3)
            .map(|c| (g[i * 3 + c] as f64 - t[i * 3 + c] as f64).powi(2))
            .sum();
        total += d.sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract("control signal mask is empty"));
    }
    Ok(total / n as f64)
}

/// Fraction of samples whose nearest class centroid is their own label.
pub fn centroid_accuracy(samples: &[MotionSequence], centroids: &Centroids) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("no samples to score"));
    }
    let mut hits = 0usize;
    for m in samples {
        let want = Vocab::class_index(&m.label)?;
        let x = flatten(m);
        let best = centroids.nearest(&x)?;
        hits += usize::from(best == want);
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mean pairwise distance between flattened samples.
pub fn diversity(samples: &[MotionSequence]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::contract("diversity needs at least 2 samples"));
    }
    let flat: Vec<Vec<f64>> = samples.iter().map(flatten).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..flat.len() {
        for j in i + 1..flat.len() {
            if flat[i].len() != flat[j].len() {
                return Err(Error::contract("samples differ in length"));
            }
            total += l2(&flat[i], &flat[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    l2(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{gen_synthetic, make_signal, MaskPattern};
    use crate::numerics::{Rng, Tensor};

    #[test]
    fn trajectory_error_examples() {
        let m = gen_synthetic("walk", 2, 64).unwrap();
        let s = make_signal(&m, MaskPattern::RootAndFeet, 4);
        assert_eq!(trajectory_error(&m, &s).unwrap(), 0.0);
        let mut shifted = m.clone();
        for p in shifted.frames.data_mut().chunks_mut(3) {
            p[0] += 3.0;
            p[1] += 4.0;
        }
        assert!((trajectory_error(&shifted, &s).unwrap() - 5.0).abs() < 1e-5);
        assert!(trajectory_error(&m, &crate::motion::ControlSignal::empty(64)).is_err());
    }

    #[test]
    fn trajectory_error_naive_oracle() {
        let mut rng = Rng::new(4);
        let a = MotionSequence::new(20, "walk", rng.gaussian_tensor(&[10, 5, 3])).unwrap();
        let targets: Tensor<f32> = rng.gaussian_tensor(&[10, 5, 3]);
        let mask: Vec<bool> = (0..50).map(|_| rng.uniform() < 0.4).collect();
        let s = ControlSignal::new(mask.clone(), targets.clone()).unwrap();
        let (mut sum, mut n) = (0.0f64, 0);
        for f in 0..10 {
            for j in 0..5 {
                if mask[f * 5 + j] {
                    let mut d = 0.0;
                    for c in 0..3 {
                        let i = (f * 5 + j) * 3 + c;
                        d += (a.frames.data()[i] as f64 - targets.data()[i] as f64).powi(2);
                    }
                    sum += d.sqrt();
                    n += 1;
                }
            }
        }
        assert!((trajectory_error(&a, &s).unwrap() - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let m = gen_synthetic("wave", 1, 16).unwrap();
        assert_eq!(diversity(&[m.clone(), m.clone()]).unwrap(), 0.0);
        let mut b = m.clone();
        b.frames.data_mut()[0] += 2.0;
        assert!((diversity(&[m.clone(), b]).unwrap() - 2.0).abs() < 1e-6);
        assert!(diversity(&[m]).is_err());
    }
}
