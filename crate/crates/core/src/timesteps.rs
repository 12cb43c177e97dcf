//! Pixel-level spectral-angle ranking of diffusion timesteps: reconstruct
//! probe instances at each candidate timestep, measure per-pixel spectral
//! angles against the originals, and keep the k most faithful timesteps.

use ndarray::{Array1, Array2};
use rand::Rng;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

use crate::diffusion::{predict_x0, q_sample, DiffusionError, NoisePredictor, NoiseSchedule};
use crate::elem::Elem;
use crate::rng::{substream, RANK_NOISE};

#[derive(Debug, Error)]
pub enum TimestepError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("empty probe set")]
    EmptyProbe,
    #[error("k = {k} exceeds {n} candidates")]
    KTooLarge { k: usize, n: usize },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ranking report: {0}")]
    MalformedReport(String),
}

/// Mean spectral angle per candidate timestep plus the selected subset.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepRanking {
    pub candidates: Vec<usize>,
    pub mean_sam: Vec<f64>,
    pub selected: Vec<usize>,
}

const NORM_GUARD: f64 = 1e-12;

/// Per-pixel spectral angle in radians between row-stacked spectra
/// (rows are pixels, columns bands). Norms are guarded by 1e-12 and the
/// cosine is clamped to [-1, 1], so angles always lie in [0, pi].
pub fn sam_map<E: Elem>(
    x0_hat: &Array2<E>,
    x0: &Array2<E>,
) -> Result<Array1<f64>, TimestepError> {
    if x0_hat.dim() != x0.dim() {
        return Err(TimestepError::ShapeMismatch {
            left: x0_hat.shape().to_vec(),
            right: x0.shape().to_vec(),
        });
    }
    let rows = x0.nrows();
    let mut out = Array1::<f64>::zeros(rows);
    for r in 0..rows {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (a, b) in x0_hat.row(r).iter().zip(x0.row(r)) {
            let (a, b) = (a.as_f64(), b.as_f64());
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        let denom = na.sqrt().max(NORM_GUARD) * nb.sqrt().max(NORM_GUARD);
        out[r] = (dot / denom).clamp(-1.0, 1.0).acos();
    }
    Ok(out)
}

/// Candidate grid: every timestep in [1, T] at stride max(1, T/100).
pub fn candidate_grid(t_max: usize) -> Vec<usize> {
    let stride = (t_max / 100).max(1);
    (1..=t_max).step_by(stride).collect()
}

/// Probe instances are noised at each candidate timestep (seeded per
/// candidate), reconstructed through the predictor, and scored by the global
/// mean spectral angle. Smaller is more faithful.
pub fn rank_timesteps<E: Elem>(
    predictor: &dyn NoisePredictor<E>,
    sched: &NoiseSchedule,
    probes: &Array2<E>,
    spatial: usize,
    candidates: &[usize],
    k: usize,
    seed: u64,
) -> Result<TimestepRanking, TimestepError> {
    if candidates.is_empty() {
        return Err(TimestepError::EmptyCandidates);
    }
    if probes.nrows() == 0 {
        return Err(TimestepError::EmptyProbe);
    }
    assert!(probes.nrows() % spatial == 0, "probe rows vs spatial extent");
    let n_probes = probes.nrows() / spatial;
    const CHUNK: usize = 32;

    let mut mean_sam = Vec::with_capacity(candidates.len());
    for &t in candidates {
        let mut rng = substream(seed, RANK_NOISE.with(t as u64));
        let normal = rand_distr::StandardNormal;
        let eps = Array2::<E>::from_shape_fn(probes.raw_dim(), |_| {
            E::from_f64(rng.sample::<f64, _>(normal))
        });
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk_start in (0..n_probes).step_by(CHUNK) {
            let chunk_end = (chunk_start + CHUNK).min(n_probes);
            let rows = chunk_start * spatial..chunk_end * spatial;
            let x0 = probes.slice(ndarray::s![rows.clone(), ..]).to_owned();
            let e = eps.slice(ndarray::s![rows, ..]).to_owned();
            let noisy = q_sample(&x0, t, &e, sched)?;
            let ts = vec![t; chunk_end - chunk_start];
            let eps_hat = predictor.predict_batch(&noisy.x_t, &ts, spatial);
            let x0_hat = predict_x0(&noisy.x_t, &eps_hat, t, sched)?;
            let angles = sam_map(&x0_hat, &x0)?;
            sum += angles.sum();
            count += angles.len();
        }
        mean_sam.push(sum / count as f64);
    }
    let selected = select_top_k_values(candidates, &mean_sam, k)?;
    Ok(TimestepRanking {
        candidates: candidates.to_vec(),
        mean_sam,
        selected,
    })
}

/// The k candidates with the smallest mean angle; ties break toward the
/// smaller timestep, and the result is listed in ascending timestep order.
pub fn select_top_k(ranking: &TimestepRanking, k: usize) -> Result<Vec<usize>, TimestepError> {
    select_top_k_values(&ranking.candidates, &ranking.mean_sam, k)
}

fn select_top_k_values(
    candidates: &[usize],
    mean_sam: &[f64],
    k: usize,
) -> Result<Vec<usize>, TimestepError> {
    if k > candidates.len() {
        return Err(TimestepError::KTooLarge {
            k,
            n: candidates.len(),
        });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        mean_sam[a]
            .partial_cmp(&mean_sam[b])
            .unwrap()
            .then(candidates[a].cmp(&candidates[b]))
    });
    let mut picked: Vec<usize> = order[..k].iter().map(|&i| candidates[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Write the ranking report: a header line then one `t<TAB>mean_sam<TAB>flag`
/// row per candidate.
pub fn write_ranking_report(ranking: &TimestepRanking, path: &Path) -> Result<(), TimestepError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t\tmean_sam\tselected")?;
    for (t, sam) in ranking.candidates.iter().zip(&ranking.mean_sam) {
        let flag = usize::from(ranking.selected.contains(t));
        writeln!(out, "{t}\t{sam:.12e}\t{flag}")?;
    }
    Ok(())
}

pub fn read_ranking_report(path: &Path) -> Result<TimestepRanking, TimestepError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| TimestepError::MalformedReport("empty file".into()))??;
    if header != "t\tmean_sam\tselected" {
        return Err(TimestepError::MalformedReport(format!(
            "unexpected header {header:?}"
        )));
    }
    let mut ranking = TimestepRanking {
        candidates: Vec::new(),
        mean_sam: Vec::new(),
        selected: Vec::new(),
    };
    for line in lines {
        let line = line?;
        let mut parts = line.split('\t');
        let (t, sam, flag) = (parts.next(), parts.next(), parts.next());
        match (t, sam, flag) {
            (Some(t), Some(sam), Some(flag)) => {
                let t: usize = t
                    .parse()
                    .map_err(|e| TimestepError::MalformedReport(format!("bad t: {e}")))?;
                let sam: f64 = sam
                    .parse()
                    .map_err(|e| TimestepError::MalformedReport(format!("bad mean_sam: {e}")))?;
                ranking.candidates.push(t);
                ranking.mean_sam.push(sam);
                if flag == "1" {
                    ranking.selected.push(t);
                }
            }
            _ => {
                return Err(TimestepError::MalformedReport(format!(
                    "short row {line:?}"
                )))
            }
        }
    }
    Ok(ranking)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use ndarray::arr2;
    use rand::Rng;

    #[test]
    fn sam_identical_vectors_are_zero() {
        let x = arr2(&[[0.3, 0.5, 0.1], [1.0, 2.0, 3.0]]);
        let angles = sam_map(&x, &x).unwrap();
        for a in angles.iter() {
            assert!(a.abs() < 1e-7);
        }
    }

    #[test]
    fn sam_orthogonal_and_diagonal_angles() {
        let a = arr2(&[[1.0, 0.0]]);
        let b = arr2(&[[0.0, 1.0]]);
        let angles = sam_map(&a, &b).unwrap();
        assert!((angles[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);

        let c = arr2(&[[1.0, 1.0]]);
        let angles = sam_map(&a, &c).unwrap();
        assert!((angles[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn sam_in_range_and_scale_invariant() {
        let mut rng = substream(3, RANK_NOISE);
        for _ in 0..50 {
            let a = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0f64));
            let b = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0f64));
            let base = sam_map(&a, &b).unwrap();
            for v in base.iter() {
                assert!((0.0..=std::f64::consts::PI).contains(v));
            }
            let mut scaled = a.clone();
            for mut row in scaled.rows_mut() {
                let c = rng.gen_range(0.1..5.0);
                row.mapv_inplace(|v| c * v);
            }
            let rescaled = sam_map(&scaled, &b).unwrap();
            for (x, y) in base.iter().zip(rescaled.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sam_zero_spectrum_guarded() {
        let zero = arr2(&[[0.0, 0.0]]);
        let b = arr2(&[[1.0, 0.0]]);
        let angles = sam_map(&zero, &b).unwrap();
        assert!((angles[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn candidate_grid_strides() {
        assert_eq!(candidate_grid(5), vec![1, 2, 3, 4, 5]);
        assert_eq!(candidate_grid(50).len(), 50);
        let grid = candidate_grid(1000);
        assert_eq!(grid.len(), 100);
        assert_eq!(grid[0], 1);
        assert_eq!(grid[1], 11);
    }

    /// Oracle that recovers the exact noise from a known clean instance.
    struct PerfectOracle {
        x0: Array2<f64>,
        sched: NoiseSchedule,
    }

    impl NoisePredictor<f64> for PerfectOracle {
        fn predict_batch(&self, x_t: &Array2<f64>, ts: &[usize], spatial: usize) -> Array2<f64> {
            let mut out = Array2::<f64>::zeros(x_t.raw_dim());
            for (i, &t) in ts.iter().enumerate() {
                let ab = self.sched.alpha_bar(t);
                let rows = i * spatial..(i + 1) * spatial;
                let x0 = self.x0.slice(ndarray::s![0..spatial, ..]);
                let slice = x_t.slice(ndarray::s![rows.clone(), ..]);
                let eps = (&slice - &x0.mapv(|v| v * ab.sqrt())).mapv(|v| v / (1.0 - ab).sqrt());
                out.slice_mut(ndarray::s![rows, ..]).assign(&eps);
            }
            out
        }
    }

    #[test]
    fn perfect_oracle_gets_zero_sam_and_smallest_t_tiebreak() {
        let sched = make_schedule(10, 0.01, 0.3).unwrap();
        let spatial = 4;
        let mut rng = substream(1, RANK_NOISE);
        let one = Array2::from_shape_fn((spatial, 3), |_| rng.gen_range(0.2..0.9f64));
        // probe set: the same instance three times
        let mut probes = Array2::<f64>::zeros((3 * spatial, 3));
        for i in 0..3 {
            probes
                .slice_mut(ndarray::s![i * spatial..(i + 1) * spatial, ..])
                .assign(&one);
        }
        let oracle = PerfectOracle {
            x0: one,
            sched: sched.clone(),
        };
        let candidates = candidate_grid(10);
        let ranking =
            rank_timesteps(&oracle, &sched, &probes, spatial, &candidates, 5, 9).unwrap();
        // float rounding keeps angles around 1e-8 rather than exactly zero;
        // every candidate reconstructs essentially perfectly
        for sam in &ranking.mean_sam {
            assert!(*sam < 1e-6, "oracle should reconstruct exactly, got {sam}");
        }
        assert_eq!(ranking.selected.len(), 5);
        assert!(ranking.selected.iter().all(|t| candidates.contains(t)));

        // the smallest-t tie-break itself, on exact ties
        let tied = TimestepRanking {
            candidates: (1..=10).collect(),
            mean_sam: vec![0.0; 10],
            selected: vec![],
        };
        assert_eq!(select_top_k(&tied, 5).unwrap(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn select_monotone_and_ties() {
        let ranking = TimestepRanking {
            candidates: (1..=10).collect(),
            mean_sam: (1..=10).map(|t| t as f64 * 0.1).collect(),
            selected: vec![],
        };
        assert_eq!(select_top_k(&ranking, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(
            select_top_k(&ranking, 10).unwrap(),
            (1..=10).collect::<Vec<_>>()
        );
        assert!(matches!(
            select_top_k(&ranking, 11),
            Err(TimestepError::KTooLarge { k: 11, n: 10 })
        ));

        let ranking = TimestepRanking {
            candidates: vec![3, 7, 9],
            mean_sam: vec![0.2, 0.2, 0.1],
            selected: vec![],
        };
        assert_eq!(select_top_k(&ranking, 2).unwrap(), vec![3, 9]);
    }

    #[test]
    fn select_by_value_order() {
        let ranking = TimestepRanking {
            candidates: vec![1, 2, 3],
            mean_sam: vec![0.3, 0.1, 0.2],
            selected: vec![],
        };
        assert_eq!(select_top_k(&ranking, 2).unwrap(), vec![2, 3]);
    }

    struct ZeroPredictor;
    impl NoisePredictor<f64> for ZeroPredictor {
        fn predict_batch(&self, x_t: &Array2<f64>, _ts: &[usize], _spatial: usize) -> Array2<f64> {
            Array2::zeros(x_t.raw_dim())
        }
    }

    #[test]
    fn ranking_is_seed_deterministic() {
        let sched = make_schedule(8, 0.01, 0.3).unwrap();
        let mut rng = substream(2, RANK_NOISE);
        let probes = Array2::from_shape_fn((5 * 4, 3), |_| rng.gen_range(0.1..0.9f64));
        let candidates = candidate_grid(8);
        let a = rank_timesteps(&ZeroPredictor, &sched, &probes, 4, &candidates, 3, 5).unwrap();
        let b = rank_timesteps(&ZeroPredictor, &sched, &probes, 4, &candidates, 3, 5).unwrap();
        assert_eq!(a, b);
        let c = rank_timesteps(&ZeroPredictor, &sched, &probes, 4, &candidates, 3, 6).unwrap();
        assert_ne!(a.mean_sam, c.mean_sam);
    }

    #[test]
    fn report_round_trip_and_byte_stability() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranking.tsv");
        let ranking = TimestepRanking {
            candidates: vec![1, 2, 3, 4],
            mean_sam: vec![0.25, 0.5, 0.125, 1.5],
            selected: vec![1, 3],
        };
        write_ranking_report(&ranking, &path).unwrap();
        let loaded = read_ranking_report(&path).unwrap();
        assert_eq!(ranking, loaded);
        let first = std::fs::read(&path).unwrap();
        write_ranking_report(&loaded, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }
}
