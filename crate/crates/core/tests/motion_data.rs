use motionlcm::motion::{
    centroid_accuracy, diversity, gen_synthetic, Centroids, Corpus, CorpusSpec, MotionSequence,
    Vocab,
};

fn corpus() -> Corpus {
    Corpus::generate(CorpusSpec::default()).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn default_corpus_sizes_and_determinism() {
    let a = corpus();
    assert_eq!((a.train.len(), a.heldout.len()), (512, 64));
    assert_eq!(a, corpus());
    for m in a.train.iter().chain(&a.heldout) {
        assert_eq!(m.frames.shape(), &[64, 5, 3]);
        assert!(m
            .frames
            .data()
            .iter()
            .all(|v| v.is_finite() && v.abs() < 100.0));
    }
    let other = Corpus::generate(CorpusSpec {
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    assert_ne!(a.train[0], other.train[0]);
}

#[test]
fn centroids_are_separated() {
    let c = corpus();
    let cls = Vocab::classes();
    let mut min = f64::MAX;
    for i in 0..cls.len() {
        for j in i + 1..cls.len() {
            let d = dist(
                c.centroids.get(cls[i]).unwrap(),
                c.centroids.get(cls[j]).unwrap(),
            );
            min = min.min(d);
        }
    }
    println!("min centroid separation {min:.3}");
    assert!(min >= 1.0);
}

#[test]
fn corpus_is_centroid_separable() {
    let c = corpus();
    let acc = centroid_accuracy(&c.train, &c.centroids).unwrap();
    let held = centroid_accuracy(&c.heldout, &c.centroids).unwrap();
    println!("train accuracy {acc:.4}, held-out {held:.4}");
    assert!(acc >= 0.95 && held >= 0.95);
    // Rotating every label to the next class makes almost every sample wrong.
    let rotated: Vec<MotionSequence> = c
        .train
        .iter()
        .map(|m| {
            let i = Vocab::class_index(&m.label).unwrap();
            let mut m = m.clone();
            m.label = Vocab::name(i % 3 + 1).unwrap().to_string();
            m
        })
        .collect();
    let adv = centroid_accuracy(&rotated, &c.centroids).unwrap();
    assert!(adv <= 1.0 / 3.0, "{adv}");
}

#[test]
fn centroids_score_themselves_perfectly() {
    let c = corpus();
    let samples: Vec<MotionSequence> = Vocab::classes()
        .iter()
        .map(|&l| {
            let data = c
                .centroids
                .get(l)
                .unwrap()
                .iter()
                .map(|&v| v as f32)
                .collect();
            MotionSequence::new(
                20,
                l,
                motionlcm::numerics::Tensor::new(vec![64, 5, 3], data).unwrap(),
            )
            .unwrap()
        })
        .collect();
    assert_eq!(centroid_accuracy(&samples, &c.centroids).unwrap(), 1.0);
    let unknown = MotionSequence {
        label: "jump".into(),
        ..samples[0].clone()
    };
    assert!(centroid_accuracy(&[unknown], &c.centroids).is_err());
}

#[test]
fn normalized_corpus_moments() {
    let c = corpus();
    let normed: Vec<Vec<f32>> = c
        .train
        .iter()
        .map(|m| c.stats.normalize(&m.frames).unwrap().into_data())
        .collect();
    for coord in 0..15 {
        let vals: Vec<f64> = normed
            .iter()
            .flat_map(|d| d.chunks(15).map(move |f| f[coord] as f64))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        // Coordinates that never move (clamped std) stay at zero.
        let expected = if c.stats.std[coord / 3][coord % 3] <= 1e-6 {
            0.0
        } else {
            1.0
        };
        assert!(mean.abs() < 1e-6, "coord {coord} mean {mean}");
        assert!((std - expected).abs() < 1e-4, "coord {coord} std {std}");
    }
}

#[test]
fn corpus_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = Corpus::generate(CorpusSpec {
        train: 12,
        heldout: 3,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let manifest = c.save(dir.path()).unwrap();
    let back = Corpus::load(&manifest).unwrap();
    assert_eq!(back, c);
    std::fs::remove_file(dir.path().join("train_0003.json")).unwrap();
    assert!(matches!(
        Corpus::load(&manifest),
        Err(motionlcm::Error::Missing(_))
    ));
}

#[test]
fn corpus_diversity_fixture() {
    let c = corpus();
    let d = diversity(&c.heldout).unwrap();
    println!("held-out diversity {d:.4}");
    assert!((d - 25.8603).abs() < 1e-3, "{d}");
}

#[test]
fn centroid_lookup_rejects_length_mismatch() {
    let m = gen_synthetic("walk", 0, 32).unwrap();
    let c = Centroids::compute(&[gen_synthetic("walk", 1, 64).unwrap()]).unwrap();
    assert!(centroid_accuracy(&[m], &c).is_err());
}
