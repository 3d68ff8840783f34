//! Synthetic label misplacement: seeded Gaussian noise injected into
//! ground-truth footprint batches, `noisy = (footprint - noise) ⊙ mask`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::codec::OffsetVec;
use crate::error::{Error, Result};
use crate::geometry::PolygonBatch;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One draw per instance, shared by all of its keypoints.
    #[default]
    Rigid,
    /// Independent draws for every keypoint.
    PerKeypoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-axis standard deviation in pixels.
    pub sigma: f64,
    pub mode: NoiseMode,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 20.0,
            mode: NoiseMode::Rigid,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Per-keypoint noise offsets laid out like the batch they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    count: usize,
    max_vertices: usize,
    offsets: Vec<OffsetVec>,
}

impl NoiseField {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn max_vertices(&self) -> usize {
        self.max_vertices
    }

    pub fn get(&self, instance: usize, k: usize) -> OffsetVec {
        self.offsets[instance * self.max_vertices + k]
    }

    pub fn instance(&self, instance: usize) -> &[OffsetVec] {
        &self.offsets[instance * self.max_vertices..(instance + 1) * self.max_vertices]
    }

    /// A field that moves every keypoint of instance `i` by `per_instance[i]`.
    pub fn rigid(per_instance: &[OffsetVec], max_vertices: usize) -> Self {
        Self {
            count: per_instance.len(),
            max_vertices,
            offsets: per_instance
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, max_vertices))
                .collect(),
        }
    }
}

/// Draw a noise field for `batch`. Each instance has its own random stream
/// keyed by `(seed, instance)`, so the field does not depend on evaluation
/// order.
pub fn sample_noise(batch: &PolygonBatch, cfg: &NoiseConfig) -> Result<NoiseField> {
    cfg.validate()?;
    let l = batch.max_vertices();
    let rows = crate::par::map_range(batch.count(), |i| {
        let mut rng = rng::keyed(cfg.seed, &[i as u64]);
        match cfg.mode {
            NoiseMode::Rigid => vec![rng::gaussian2(&mut rng, cfg.sigma); l],
            NoiseMode::PerKeypoint => (0..l).map(|_| rng::gaussian2(&mut rng, cfg.sigma)).collect(),
        }
    });
    Ok(NoiseField {
        count: batch.count(),
        max_vertices: l,
        offsets: rows.into_iter().flatten().collect(),
    })
}

/// Subtract the field from every valid keypoint and zero the padding.
///
/// Also returns the per-instance recovery target: the offset that moves the
/// noisy polygon back onto the footprint (the rigid draw, or the mean over
/// valid keypoints in per-keypoint mode).
pub fn inject(
    footprints: &PolygonBatch,
    field: &NoiseField,
) -> Result<(PolygonBatch, Vec<OffsetVec>)> {
    if field.count != footprints.count() || field.max_vertices != footprints.max_vertices() {
        return Err(Error::ShapeMismatch(format!(
            "noise field {}x{} does not match batch {}x{}",
            field.count,
            field.max_vertices,
            footprints.count(),
            footprints.max_vertices()
        )));
    }
    let l = footprints.max_vertices();
    let mut coords = footprints.coords().to_vec();
    let mut targets = Vec::with_capacity(footprints.count());
    for i in 0..footprints.count() {
        let n = footprints.vertex_count(i);
        let mut sum = OffsetVec::ZERO;
        for k in 0..n {
            let v = field.get(i, k);
            let slot = i * l + k;
            coords[2 * slot] -= v.dx;
            coords[2 * slot + 1] -= v.dy;
            sum += v;
        }
        let rigid = field.instance(i)[..n].iter().all(|&v| v == field.get(i, 0));
        targets.push(if rigid { field.get(i, 0) } else { sum / n as f64 });
    }
    let mut noisy =
        PolygonBatch::from_parts(footprints.count(), l, coords, footprints.validity().to_vec())?;
    noisy.apply_mask();
    Ok((noisy, targets))
}

/// Uniform sample of `m_prime` instances without replacement.
pub fn subsample(batch: &PolygonBatch, m_prime: usize, seed: u64) -> Result<PolygonBatch> {
    if m_prime == 0 || m_prime > batch.count() {
        return Err(Error::InvalidParameter(format!(
            "m_prime must be in 1..={}, got {m_prime}",
            batch.count()
        )));
    }
    let mut rng = rng::keyed(seed, &[]);
    let picked = index::sample(&mut rng, batch.count(), m_prime).into_vec();
    Ok(batch.select(&picked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pad_batch, Polygon};

    fn squares(n: usize) -> PolygonBatch {
        let polys: Vec<Polygon> = (0..n)
            .map(|i| {
                let x = (i % 10) as f64 * 50.0;
                let y = (i / 10) as f64 * 50.0;
                if i % 3 == 0 {
                    Polygon::from_coords(&[(x, y), (x + 20.0, y), (x, y + 20.0)]).unwrap()
                } else {
                    Polygon::rect(x, y, x + 20.0, y + 10.0).unwrap()
                }
            })
            .collect();
        pad_batch(&polys).unwrap()
    }

    #[test]
    fn zero_sigma_gives_zero_field() {
        let b = squares(7);
        for mode in [NoiseMode::Rigid, NoiseMode::PerKeypoint] {
            let f = sample_noise(&b, &NoiseConfig { sigma: 0.0, mode, seed: 3 }).unwrap();
            assert!(f.offsets.iter().all(|v| v.norm() == 0.0));
        }
    }

    #[test]
    fn rigid_rows_are_constant() {
        let b = squares(12);
        let f = sample_noise(&b, &NoiseConfig { sigma: 5.0, mode: NoiseMode::Rigid, seed: 9 }).unwrap();
        for i in 0..b.count() {
            let row = f.instance(i);
            assert!(row.iter().all(|&v| v == row[0]));
        }
        let pk = sample_noise(&b, &NoiseConfig { sigma: 5.0, mode: NoiseMode::PerKeypoint, seed: 9 })
            .unwrap();
        assert_ne!(pk.instance(1)[0], pk.instance(1)[1]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let b = squares(20);
        let cfg = NoiseConfig { sigma: 3.0, mode: NoiseMode::PerKeypoint, seed: 77 };
        assert_eq!(sample_noise(&b, &cfg).unwrap(), sample_noise(&b, &cfg).unwrap());
    }

    #[test]
    fn negative_sigma_rejected() {
        let cfg = NoiseConfig { sigma: -1.0, ..Default::default() };
        assert!(sample_noise(&squares(2), &cfg).is_err());
    }

    #[test]
    fn zero_field_is_identity_under_mask() {
        let b = squares(6);
        let field = NoiseField::rigid(&[OffsetVec::ZERO; 6], b.max_vertices());
        let (noisy, targets) = inject(&b, &field).unwrap();
        assert_eq!(noisy, b);
        assert!(targets.iter().all(|t| *t == OffsetVec::ZERO));
    }

    #[test]
    fn rigid_injection_sign_convention() {
        let sq = pad_batch(&[Polygon::rect(0.0, 0.0, 4.0, 4.0).unwrap()]).unwrap();
        let n = OffsetVec::new(5.0, -3.0);
        let (noisy, targets) = inject(&sq, &NoiseField::rigid(&[n], 4)).unwrap();
        assert_eq!(noisy.polygon(0), Polygon::rect(-5.0, 3.0, -1.0, 7.0).unwrap());
        assert_eq!(targets, vec![n]);
    }

    #[test]
    fn per_keypoint_target_is_keypoint_mean() {
        let sq = pad_batch(&[Polygon::rect(0.0, 0.0, 4.0, 4.0).unwrap()]).unwrap();
        let field = NoiseField {
            count: 1,
            max_vertices: 4,
            offsets: vec![
                OffsetVec::new(1.0, 0.0),
                OffsetVec::new(3.0, 0.0),
                OffsetVec::new(1.0, 2.0),
                OffsetVec::new(3.0, 2.0),
            ],
        };
        let (_, targets) = inject(&sq, &field).unwrap();
        assert_eq!(targets, vec![OffsetVec::new(2.0, 1.0)]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let b = squares(3);
        let field = NoiseField::rigid(&[OffsetVec::ZERO; 2], b.max_vertices());
        assert!(matches!(inject(&b, &field), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn padded_entries_are_zero_after_injection() {
        let b = squares(9);
        let cfg = NoiseConfig { sigma: 4.0, mode: NoiseMode::PerKeypoint, seed: 1 };
        let (noisy, _) = inject(&b, &sample_noise(&b, &cfg).unwrap()).unwrap();
        for (slot, &m) in noisy.validity().iter().enumerate() {
            if m == 0 {
                assert_eq!(noisy.coords()[2 * slot], 0.0);
                assert_eq!(noisy.coords()[2 * slot + 1], 0.0);
            }
        }
    }

    #[test]
    fn rigid_roundtrip_recovers_footprints() {
        // dyadic coordinates keep subtraction and re-addition exact
        let b = squares(1000);
        let cfg = NoiseConfig { sigma: 20.0, mode: NoiseMode::Rigid, seed: 5 };
        let field = sample_noise(&b, &cfg).unwrap();
        let q: Vec<OffsetVec> = (0..b.count())
            .map(|i| {
                let v = field.get(i, 0);
                OffsetVec::new((v.dx * 64.0).round() / 64.0, (v.dy * 64.0).round() / 64.0)
            })
            .collect();
        let (noisy, targets) = inject(&b, &NoiseField::rigid(&q, b.max_vertices())).unwrap();
        assert_eq!(noisy.translate_each(&targets).unwrap(), b);

        // unquantized draws recover to rounding error
        let (noisy, targets) = inject(&b, &field).unwrap();
        let back = noisy.translate_each(&targets).unwrap();
        for (a, e) in back.coords().iter().zip(b.coords()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn subsample_examples() {
        let b = squares(15);
        let all = subsample(&b, 15, 4).unwrap();
        let mut got: Vec<_> = all.polygons().into_iter().map(|p| format!("{p:?}")).collect();
        let mut want: Vec<_> = b.polygons().into_iter().map(|p| format!("{p:?}")).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);

        let one = subsample(&b, 1, 4).unwrap();
        assert_eq!(one.count(), 1);
        assert!(b.polygons().contains(&one.polygon(0)));

        assert_eq!(subsample(&b, 6, 11).unwrap(), subsample(&b, 6, 11).unwrap());
        assert!(subsample(&b, 0, 1).is_err());
        assert!(subsample(&b, 16, 1).is_err());
    }
}
