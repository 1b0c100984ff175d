//! Weak supervision from embedding similarity: cosine scores between a
//! sample's description embedding and each frame, and the Top-K timestamps
//! used as pseudo-labeled keyframes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dataio::{description_hash, load_manifest, save_manifest, Dataset};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// One cosine score per frame, each in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityScores(pub Vec<f64>);

/// K keyframe timestamps, 1-based, ascending, distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels(pub Vec<usize>);

/// Cosine similarity between the description and every frame row.
pub fn cosine_scores(frames: &Tensor, description: &Tensor) -> Result<SimilarityScores> {
    if frames.rank() != 2 || description.rank() != 1 || frames.cols() != description.len() {
        return Err(Error::Shape(format!(
            "cosine_scores expects frames TxD and description D, got {:?} and {:?}",
            frames.extents(),
            description.extents()
        )));
    }
    let d = description.data();
    let d_norm = d.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if d_norm == 0.0 {
        return Err(Error::DegenerateInput(
            "description embedding has zero norm".into(),
        ));
    }
    let mut scores = Vec::with_capacity(frames.rows());
    for t in 0..frames.rows() {
        let row = frames.row(t);
        let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "frame {} has zero norm",
                t + 1
            )));
        }
        let dot: f64 = row.iter().zip(d).map(|(&a, &b)| a * b).sum();
        scores.push(dot / (norm * d_norm));
    }
    Ok(SimilarityScores(scores))
}

/// Indices of the K highest scores, ties toward the smaller index, returned
/// in ascending temporal order (1-based).
pub fn select_pseudo_labels(scores: &SimilarityScores, k: usize) -> Result<PseudoLabels> {
    let t = scores.0.len();
    if k > t {
        return Err(Error::Contract(format!(
            "cannot select K={k} pseudo-labels from T={t} scores"
        )));
    }
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        scores.0[b]
            .partial_cmp(&scores.0[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order[..k].iter().map(|&i| i + 1).collect();
    chosen.sort_unstable();
    Ok(PseudoLabels(chosen))
}

/// Pseudo-labels for one sample, honoring a valid cache and computing (and
/// reporting) fresh labels otherwise.
pub fn labels_for_sample(
    dataset: &Dataset,
    index: usize,
    k: usize,
) -> Result<(PseudoLabels, SimilarityScores)> {
    let record = &dataset.manifest.samples[index];
    let frames = dataset.load_frames(record)?;
    let description = dataset.load_description(record)?;
    let scores = cosine_scores(&frames, &description)?;
    let labels = match (&record.pseudo_labels, &record.description_hash) {
        (Some(w), Some(hash)) if w.len() == k => {
            if *hash == description_hash(&dataset.root, record)? {
                PseudoLabels(w.clone())
            } else {
                select_pseudo_labels(&scores, k)?
            }
        }
        _ => select_pseudo_labels(&scores, k)?,
    };
    Ok((labels, scores))
}

/// Rewrites the manifest with cached pseudo-labels and emits the per-sample
/// score dump (CSV: sample id, t, s_t). Returns the number of samples.
pub fn cache_pseudo_labels(manifest_path: &Path, k: usize, scores_csv: &Path) -> Result<usize> {
    let dataset = load_manifest(manifest_path)?;
    let mut manifest = dataset.manifest.clone();
    let mut csv = String::from("sample_id,t,score\n");
    for (i, record) in manifest.samples.iter_mut().enumerate() {
        let frames = dataset.load_frames(record)?;
        let description = dataset.load_description(record)?;
        let scores = cosine_scores(&frames, &description)?;
        let labels = select_pseudo_labels(&scores, k)?;
        for (t, s) in scores.0.iter().enumerate() {
            csv.push_str(&format!("{},{},{}\n", record.id, t + 1, s));
        }
        record.pseudo_labels = Some(labels.0);
        record.description_hash = Some(description_hash(&dataset.root, record)?);
        let _ = i;
    }
    save_manifest(&manifest, manifest_path)?;
    let mut f = fs::File::create(scores_csv)?;
    f.write_all(csv.as_bytes())?;
    Ok(manifest.samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_scores() {
        let frames = Tensor::matrix(
            3,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.7071, 0.7071],
            Precision::P64,
        )
        .unwrap();
        let d = Tensor::vector(vec![1.0, 0.0], Precision::P64).unwrap();
        let s = cosine_scores(&frames, &d).unwrap();
        let expected = [1.0, 0.0, 0.7071];
        for (got, want) in s.0.iter().zip(expected) {
            assert!((got - want).abs() < 1e-4, "got {got}, want {want}");
        }
    }

    #[test]
    fn self_similarity_is_one() {
        let frames =
            Tensor::matrix(2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4], Precision::P64).unwrap();
        let d = Tensor::vector(vec![0.3, -1.2, 0.7], Precision::P64).unwrap();
        let s = cosine_scores(&frames, &d).unwrap();
        assert!((s.0[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_description_scores_zero() {
        let frames = Tensor::matrix(2, 2, vec![1.0, 0.0, -3.0, 0.0], Precision::P64).unwrap();
        let d = Tensor::vector(vec![0.0, 2.0], Precision::P64).unwrap();
        let s = cosine_scores(&frames, &d).unwrap();
        assert_eq!(s.0, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_norm_frame_names_index() {
        let frames = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0], Precision::P64).unwrap();
        let d = Tensor::vector(vec![1.0, 0.0], Precision::P64).unwrap();
        match cosine_scores(&frames, &d) {
            Err(Error::DegenerateInput(msg)) => assert!(msg.contains('2'), "{msg}"),
            other => panic!("expected degenerate input, got {other:?}"),
        }
    }

    #[test]
    fn selection_examples() {
        let s = SimilarityScores(vec![1.0, 0.0, 0.7071]);
        assert_eq!(select_pseudo_labels(&s, 2).unwrap().0, vec![1, 3]);

        let ties = SimilarityScores(vec![0.5; 5]);
        assert_eq!(select_pseudo_labels(&ties, 2).unwrap().0, vec![1, 2]);

        let s = SimilarityScores(vec![0.2, 0.9, -0.1]);
        assert_eq!(select_pseudo_labels(&s, 3).unwrap().0, vec![1, 2, 3]);

        assert!(select_pseudo_labels(&s, 4).is_err());
    }

    #[test]
    fn agrees_with_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let t = rng.gen_range(1..=24);
            let k = rng.gen_range(1..=t);
            let scores: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Oracle: sort all (score, index) pairs, highest first, smaller
            // index on ties, take K, report ascending.
            let mut pairs: Vec<(f64, usize)> =
                scores.iter().cloned().zip(1..=t).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut expected: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
            expected.sort_unstable();

            let got = select_pseudo_labels(&SimilarityScores(scores), k).unwrap();
            assert_eq!(got.0, expected);
        }
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let d_i = 6;
            let frames_data: Vec<f64> = (0..4 * d_i).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let desc_data: Vec<f64> = (0..d_i).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let frames = Tensor::matrix(4, d_i, frames_data.clone(), Precision::P64).unwrap();
            let desc = Tensor::vector(desc_data.clone(), Precision::P64).unwrap();
            let base = cosine_scores(&frames, &desc).unwrap();

            let scale_f = rng.gen_range(0.1..10.0);
            let scale_d = rng.gen_range(0.1..10.0);
            let frames2 = Tensor::matrix(
                4,
                d_i,
                frames_data.iter().map(|&v| v * scale_f).collect(),
                Precision::P64,
            )
            .unwrap();
            let desc2 = Tensor::vector(
                desc_data.iter().map(|&v| v * scale_d).collect(),
                Precision::P64,
            )
            .unwrap();
            let scaled = cosine_scores(&frames2, &desc2).unwrap();
            for (a, b) in base.0.iter().zip(&scaled.0) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
