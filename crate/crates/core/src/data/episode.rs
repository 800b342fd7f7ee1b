//! N-way K-shot episodes.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;

use super::manifest::{Dataset, Split};
use super::{DataError, PointCloud};
use crate::tensor::Tensor;

/// Dense relabelling of an episode's part ids onto `0..c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    global: Vec<usize>,
}

impl LabelMap {
    /// Sorted, deduplicated union of the given part ids.
    pub fn from_parts<I: IntoIterator<Item = usize>>(parts: I) -> Self {
        let set: BTreeSet<usize> = parts.into_iter().collect();
        Self {
            global: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_empty()
    }

    pub fn to_dense(&self, global: usize) -> Option<usize> {
        self.global.binary_search(&global).ok()
    }

    pub fn to_global(&self, dense: usize) -> Option<usize> {
        self.global.get(dense).copied()
    }

    pub fn global_ids(&self) -> &[usize] {
        &self.global
    }
}

/// Whether a shape may drive parameter updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetRole {
    Support,
    /// Evaluation only; training code refuses these.
    Query,
}

/// A normalized shape ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeShape {
    pub cloud: PointCloud,
    /// Dense labels in `0..c`.
    pub targets: Vec<usize>,
    pub role: SetRole,
}

impl EpisodeShape {
    pub fn new(cloud: PointCloud, map: &LabelMap, role: SetRole) -> Result<Self, DataError> {
        let targets = cloud
            .labels
            .iter()
            .map(|&l| {
                map.to_dense(l).ok_or(DataError::LabelOutsideSchema {
                    line: 0,
                    label: l,
                    category: cloud.category.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            cloud,
            targets,
            role,
        })
    }

    pub fn coords(&self) -> Tensor {
        self.cloud.coords()
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub categories: Vec<String>,
    pub support: Vec<EpisodeShape>,
    pub query: Vec<EpisodeShape>,
    pub label_map: LabelMap,
}

impl Episode {
    pub fn classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn support_points(&self) -> usize {
        self.support.iter().map(EpisodeShape::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Points sampled from every shape before normalization.
    pub points: usize,
    /// Upper bound on query shapes per category; `None` keeps the whole pool.
    pub query_limit: Option<usize>,
}

/// Draws an episode from the categories in `pool`.
///
/// `n_way` categories are chosen without replacement; each contributes
/// `k_shot` training-split support shapes. The query set is the category's
/// test split (or, when it has none, its remaining training shapes).
pub fn build_episode<R: Rng>(
    dataset: &Dataset,
    pool: &[String],
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode, DataError> {
    if spec.n_way == 0 || spec.k_shot == 0 || spec.points == 0 {
        return Err(DataError::Episode(
            "n_way, k_shot and points must be ≥ 1".into(),
        ));
    }
    if pool.len() < spec.n_way {
        return Err(DataError::NotEnoughCategories {
            need: spec.n_way,
            have: pool.len(),
        });
    }
    let mut chosen: Vec<String> = sample(rng, pool.len(), spec.n_way)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    chosen.sort();

    let mut parts = Vec::new();
    for name in &chosen {
        let info = dataset
            .category(name)
            .ok_or_else(|| DataError::UnknownCategory(name.clone()))?;
        parts.extend(info.schema.parts.iter().copied());
    }
    let label_map = LabelMap::from_parts(parts);

    let mut support = Vec::new();
    let mut query = Vec::new();
    for name in &chosen {
        let train = dataset.split(name, Split::Train);
        if train.len() < spec.k_shot {
            return Err(DataError::InsufficientShapes {
                category: name.clone(),
                need: spec.k_shot,
                have: train.len(),
            });
        }
        let picked = sample(rng, train.len(), spec.k_shot).into_vec();
        let test = dataset.split(name, Split::Test);
        let mut pool_q: Vec<&PointCloud> = if test.is_empty() {
            let taken: BTreeSet<usize> = picked.iter().copied().collect();
            (0..train.len())
                .filter(|i| !taken.contains(i))
                .map(|i| &train[i].cloud)
                .collect()
        } else {
            test.iter().map(|r| &r.cloud).collect()
        };
        if pool_q.is_empty() {
            return Err(DataError::InsufficientShapes {
                category: name.clone(),
                need: spec.k_shot + 1,
                have: train.len(),
            });
        }
        if let Some(limit) = spec.query_limit {
            if pool_q.len() > limit {
                let keep = sample(rng, pool_q.len(), limit).into_vec();
                pool_q = keep.into_iter().map(|i| pool_q[i]).collect();
            }
        }
        for i in picked {
            let cloud = train[i]
                .cloud
                .sample_points(spec.points, rng.random())
                .normalize();
            support.push(EpisodeShape::new(cloud, &label_map, SetRole::Support)?);
        }
        for cloud in pool_q {
            let cloud = cloud.sample_points(spec.points, rng.random()).normalize();
            query.push(EpisodeShape::new(cloud, &label_map, SetRole::Query)?);
        }
    }
    Ok(Episode {
        categories: chosen,
        support,
        query,
        label_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Role;
    use crate::data::synthetic::SyntheticKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus() -> Dataset {
        Dataset::synthetic(
            &[
                (SyntheticKind::Table, Role::Base),
                (SyntheticKind::Mug, Role::Base),
                (SyntheticKind::Barbell, Role::Base),
            ],
            12,
            4,
            96,
            0,
        )
    }

    fn spec(n_way: usize, k_shot: usize) -> EpisodeSpec {
        EpisodeSpec {
            n_way,
            k_shot,
            points: 64,
            query_limit: None,
        }
    }

    #[test]
    fn two_way_one_shot() {
        let ds = corpus();
        let pool = ds.with_role(Role::Base);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = build_episode(&ds, &pool, &spec(2, 1), &mut rng).unwrap();
        assert_eq!(ep.support.len(), 2);
        assert_eq!(ep.query.len(), 8);
        assert!(ep
            .support
            .iter()
            .all(|s| s.len() == 64 && s.role == SetRole::Support));
    }

    #[test]
    fn one_way_ten_shot() {
        let ds = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = build_episode(&ds, &["mug".to_string()], &spec(1, 10), &mut rng).unwrap();
        assert_eq!(ep.support.len(), 10);
        assert_eq!(ep.classes(), 2);
    }

    #[test]
    fn label_map_of_two_two_part_categories() {
        let ds = corpus();
        let pool = vec!["table".to_string(), "mug".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = build_episode(&ds, &pool, &spec(2, 1), &mut rng).unwrap();
        assert_eq!(ep.classes(), 4);
        assert_eq!(ep.label_map.global_ids(), &[3, 4, 8, 9]);
        for dense in 0..4 {
            let g = ep.label_map.to_global(dense).unwrap();
            assert_eq!(ep.label_map.to_dense(g), Some(dense));
        }
        for s in ep.support.iter().chain(&ep.query) {
            assert!(s.targets.iter().all(|&t| t < 4));
        }
    }

    #[test]
    fn support_and_query_are_disjoint_without_test_split() {
        let mut ds = Dataset::new();
        ds.add_category(SyntheticKind::Mug.schema(), Role::Base);
        for i in 0..6 {
            let cloud = crate::data::generate_synthetic(SyntheticKind::Mug, 40, i);
            ds.add_shape(Split::Train, cloud).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sp = EpisodeSpec {
            points: 40,
            ..spec(1, 4)
        };
        let ep = build_episode(&ds, &["mug".into()], &sp, &mut rng).unwrap();
        assert_eq!(ep.query.len(), 2);
        for q in &ep.query {
            for s in &ep.support {
                assert_ne!(q.cloud, s.cloud);
            }
        }
    }

    #[test]
    fn insufficient_shapes_and_categories() {
        let ds = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            build_episode(&ds, &["mug".into()], &spec(1, 13), &mut rng),
            Err(DataError::InsufficientShapes { .. })
        ));
        assert!(matches!(
            build_episode(&ds, &["mug".into()], &spec(2, 1), &mut rng),
            Err(DataError::NotEnoughCategories { .. })
        ));
    }

    #[test]
    fn episodes_are_seeded() {
        let ds = corpus();
        let pool = ds.with_role(Role::Base);
        let a = build_episode(&ds, &pool, &spec(1, 3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_episode(&ds, &pool, &spec(1, 3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
