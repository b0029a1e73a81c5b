use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{from_bytes, to_bytes};
use super::*;

fn set(rows: &[&[f64]], modality: Modality) -> EmbeddingSet {
    let d = rows[0].len();
    let data = rows.concat();
    EmbeddingSet::new(Tensor::new(vec![rows.len(), d], data).unwrap(), modality, (0..rows.len() as u32).collect()).unwrap()
}

/// Textbook silhouette: group members per cluster, then average distances per point.
fn oracle_silhouette(points: &[Vec<f64>], ids: &[usize], k: usize) -> f64 {
    let dist = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() };
    let members: Vec<Vec<usize>> = (0..k).map(|c| (0..ids.len()).filter(|&i| ids[i] == c).collect()).collect();
    let mut total = 0.0;
    for i in 0..points.len() {
        let own = &members[ids[i]];
        if own.len() == 1 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| dist(&points[i], &points[j])).sum::<f64>() / (own.len() - 1) as f64;
        let mut b = f64::INFINITY;
        for (c, m) in members.iter().enumerate() {
            if c == ids[i] {
                continue;
            }
            let mean = m.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / m.len() as f64;
            b = b.min(mean);
        }
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / points.len() as f64
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    for i in (1..n).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let points = ids
        .iter()
        .map(|&c| (0..d).map(|j| rng.random_range(-1.0..1.0) + if j == 0 { 2.0 * c as f64 } else { 0.0 }).collect())
        .collect();
    (points, ids)
}

fn assignment(points: &[Vec<f64>], ids: &[usize], k: usize) -> ClusterAssignment {
    let d = points[0].len();
    ClusterAssignment::new(k, ids.to_vec(), Tensor::new(vec![points.len(), d], points.concat()).unwrap()).unwrap()
}

#[test]
fn silhouette_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for case in 0..100 {
        let k = [2, 3, 5][case % 3];
        let n = rng.random_range(k..=200);
        let d = rng.random_range(1..=16);
        let (points, ids) = random_instance(&mut rng, n, d, k);
        let got = silhouette_score(&assignment(&points, &ids, k));
        let want = oracle_silhouette(&points, &ids, k);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

#[test]
fn two_plus_two_fixture() {
    let b = (10.0 + 101f64.sqrt()) / 2.0;
    let expected = (b - 1.0) / b;
    let points = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
    let ss = silhouette_score(&assignment(&points, &[0, 0, 1, 1], 2));
    assert!((ss - expected).abs() < 1e-9);
    assert!((ss - 0.900_248_757_758_219_4).abs() < 1e-12);
    let images = set(&[&[0.0, 0.0], &[0.0, 1.0]], Modality::Image);
    let texts = set(&[&[10.0, 0.0], &[10.0, 1.0]], Modality::Text);
    let composed = silhouette_score(&modality_clusters(&images, &texts).unwrap());
    assert!((composed - expected).abs() < 1e-9);
}

#[test]
fn coincident_clusters_score_zero() {
    let points = vec![vec![1.0, 1.0]; 4];
    assert_eq!(silhouette_score(&assignment(&points, &[0, 0, 1, 1], 2)), 0.0);
}

#[test]
fn separation_limit_approaches_one() {
    let mut last = 0.0;
    for gap in [10.0, 100.0, 1e4, 1e6] {
        let points = vec![vec![0.0], vec![1.0], vec![gap], vec![gap + 1.0]];
        let ss = silhouette_score(&assignment(&points, &[0, 0, 1, 1], 2));
        assert!(ss > last);
        last = ss;
    }
    assert!(last > 1.0 - 1e-5);
}

#[test]
fn singleton_cluster_point_scores_zero() {
    let points = vec![vec![0.0], vec![1.0], vec![5.0]];
    let values = silhouette_values(&assignment(&points, &[0, 0, 1], 2));
    assert_eq!(values[2], 0.0);
}

#[test]
fn invalid_assignments() {
    let pts = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
    assert!(matches!(ClusterAssignment::new(1, vec![0, 0, 0], pts.clone()), Err(Error::Input(_))));
    assert!(matches!(ClusterAssignment::new(3, vec![0, 1, 1], pts.clone()), Err(Error::Input(_))));
    assert!(matches!(ClusterAssignment::new(2, vec![0, 2, 1], pts), Err(Error::Input(_))));
}

#[test]
fn acs_examples() {
    let i = set(&[&[1.0, 0.0], &[0.0, 1.0]], Modality::Image);
    assert!((average_cosine_similarity(&i, &i, &[0, 1]).unwrap() - 1.0).abs() < 1e-15);
    let i1 = set(&[&[1.0, 0.0]], Modality::Image);
    let t1 = set(&[&[0.0, 1.0]], Modality::Text);
    assert_eq!(average_cosine_similarity(&i1, &t1, &[0]).unwrap(), 0.0);
    let t = set(&[&[1.0, 0.0]], Modality::Text);
    assert!((average_cosine_similarity(&i, &t, &[0, 0]).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn acs_errors() {
    let i = set(&[&[0.0, 0.0]], Modality::Image);
    let t = set(&[&[1.0, 0.0]], Modality::Text);
    assert!(matches!(average_cosine_similarity(&i, &t, &[0]), Err(Error::Degenerate(_))));
    let empty = EmbeddingSet::new(Tensor::zeros(&[0, 2]), Modality::Image, vec![]).unwrap();
    assert!(matches!(average_cosine_similarity(&empty, &t, &[]), Err(Error::Input(_))));
}

#[test]
fn modality_cluster_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<f64>> = (0..15).map(|_| vec![rng.random_range(-1.0..1.0); 3]).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let a = modality_clusters(&set(&refs[..10], Modality::Image), &set(&refs[10..], Modality::Text)).unwrap();
    assert_eq!(a.k(), 2);
    assert_eq!(a.sizes(), vec![10, 5]);
    let empty = EmbeddingSet::new(Tensor::zeros(&[0, 3]), Modality::Text, vec![]).unwrap();
    assert!(modality_clusters(&set(&refs[..10], Modality::Image), &empty).is_err());
    let wide = set(&[&[1.0, 0.0, 0.0, 0.0]], Modality::Text);
    assert!(modality_clusters(&set(&refs[..10], Modality::Image), &wide).is_err());
}

fn report(acs: f64, ss: f64, hash: &str) -> AlignmentReport {
    AlignmentReport { acs, ss, n_images: 1, n_texts: 1, config_hash: hash.into() }
}

#[test]
fn delta_sign_conventions() {
    let d = alignment_delta(&report(0.2, 0.5, "h"), &report(0.5, 0.3, "h")).unwrap();
    assert!((d.delta_ss - 0.2).abs() < 1e-15);
    assert!((d.delta_cos - 0.3).abs() < 1e-15);
    let same = alignment_delta(&report(0.2, 0.5, "h"), &report(0.2, 0.5, "h")).unwrap();
    assert_eq!((same.delta_ss, same.delta_cos), (0.0, 0.0));
    assert!(matches!(alignment_delta(&report(0.0, 0.0, "a"), &report(0.0, 0.0, "b")), Err(Error::Usage(_))));
}

#[test]
fn embedding_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.emb1");
    let s = set(&[&[0.6, 0.8], &[1.0, 0.0], &[0.0, -1.0]], Modality::Image).with_source("zs");
    write_embeddings(&s, &path, &["a".into(), "b".into(), "c".into()]).unwrap();
    let (back, side) = read_embeddings(&path).unwrap();
    assert_eq!(back, s);
    assert!(back.is_normalized());
    assert_eq!(side.unwrap().class_names.len(), 3);
    assert_eq!(to_bytes(&back), std::fs::read(&path).unwrap());
    let plain = dir.path().join("txt.emb1");
    write_embeddings(&set(&[&[3.0, 4.0]], Modality::Text), &plain, &[]).unwrap();
    let (t, side) = read_embeddings(&plain).unwrap();
    assert!(side.is_none());
    assert!(!t.is_normalized());
}

#[test]
fn big_endian_embedding_file_is_rejected() {
    let mut be = Vec::new();
    be.extend_from_slice(EMB_MAGIC);
    be.extend_from_slice(&1u32.to_be_bytes());
    be.extend_from_slice(&2u32.to_be_bytes());
    be.push(0);
    for v in [1.0f64, 0.0] {
        be.extend_from_slice(&v.to_be_bytes());
    }
    be.extend_from_slice(&0u32.to_be_bytes());
    let err = from_bytes(&be).unwrap_err();
    assert!(err.to_string().contains("big-endian"), "{err}");
    assert!(from_bytes(b"EMB0").is_err());
}

fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn apply(q: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    q.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn to_set(rows: &[Vec<f64>], modality: Modality, ids: Vec<u32>) -> EmbeddingSet {
    EmbeddingSet::new(Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap(), modality, ids).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn silhouette_invariant_under_rotation_translation(seed in 0u64..10_000, n in 6usize..40, d in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (points, ids) = random_instance(&mut rng, n, d, 3);
        let q = orthogonal(&mut rng, d);
        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let moved: Vec<Vec<f64>> = points.iter().map(|p| apply(&q, p).iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let a = silhouette_score(&assignment(&points, &ids, 3));
        let b = silhouette_score(&assignment(&moved, &ids, 3));
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn measures_invariant_under_within_cluster_permutation(seed in 0u64..10_000, n in 4usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs = unit_rows(&mut rng, n, 4);
        let txts = unit_rows(&mut rng, 3, 4);
        let classes: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pimgs: Vec<Vec<f64>> = perm.iter().map(|&i| imgs[i].clone()).collect();
        let pclasses: Vec<u32> = perm.iter().map(|&i| classes[i]).collect();
        let t = to_set(&txts, Modality::Text, vec![0, 1, 2]);
        let r1 = measure(&to_set(&imgs, Modality::Image, classes), &t, "h").unwrap();
        let r2 = measure(&to_set(&pimgs, Modality::Image, pclasses), &t, "h").unwrap();
        prop_assert!((r1.acs - r2.acs).abs() < 1e-12);
        prop_assert!((r1.ss - r2.ss).abs() < 1e-12);
    }

    #[test]
    fn acs_invariant_under_rotation(seed in 0u64..10_000, n in 1usize..30, d in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs = unit_rows(&mut rng, n, d);
        let txts = unit_rows(&mut rng, n, d);
        let q = orthogonal(&mut rng, d);
        let map: Vec<usize> = (0..n).collect();
        let ids: Vec<u32> = (0..n as u32).collect();
        let a = average_cosine_similarity(&to_set(&imgs, Modality::Image, ids.clone()), &to_set(&txts, Modality::Text, ids.clone()), &map).unwrap();
        let ri: Vec<Vec<f64>> = imgs.iter().map(|x| apply(&q, x)).collect();
        let rt: Vec<Vec<f64>> = txts.iter().map(|x| apply(&q, x)).collect();
        let b = average_cosine_similarity(&to_set(&ri, Modality::Image, ids.clone()), &to_set(&rt, Modality::Text, ids), &map).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn acs_symmetric_under_pair_swap(seed in 0u64..10_000, n in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs = unit_rows(&mut rng, n, 5);
        let txts = unit_rows(&mut rng, n, 5);
        let map: Vec<usize> = (0..n).collect();
        let ids: Vec<u32> = (0..n as u32).collect();
        let a = average_cosine_similarity(&to_set(&imgs, Modality::Image, ids.clone()), &to_set(&txts, Modality::Text, ids.clone()), &map).unwrap();
        let (x, y) = (0, n - 1);
        let mut swapped_imgs = imgs.clone();
        swapped_imgs.swap(x, y);
        let mut swapped_map = map.clone();
        swapped_map.swap(x, y);
        let b = average_cosine_similarity(&to_set(&swapped_imgs, Modality::Image, ids.clone()), &to_set(&txts, Modality::Text, ids), &swapped_map).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn duplicating_points_tracks_oracle(seed in 0u64..10_000, n in 3usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs = unit_rows(&mut rng, n, 4);
        let txts = unit_rows(&mut rng, n, 4);
        let i = to_set(&imgs, Modality::Image, vec![0; n]);
        let t = to_set(&txts, Modality::Text, vec![0; n]);
        let once = silhouette_score(&modality_clusters(&i, &t).unwrap());
        let di: Vec<Vec<f64>> = imgs.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        let dt: Vec<Vec<f64>> = txts.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        let twice = silhouette_score(&modality_clusters(&to_set(&di, Modality::Image, vec![0; 2 * n]), &to_set(&dt, Modality::Text, vec![0; 2 * n])).unwrap());
        let mut all = di.clone();
        all.extend(dt.iter().cloned());
        let ids: Vec<usize> = (0..4 * n).map(|j| usize::from(j >= 2 * n)).collect();
        prop_assert!((twice - oracle_silhouette(&all, &ids, 2)).abs() < 1e-9);
        // each duplicate is a zero-distance neighbour, so a(i) can only shrink
        prop_assert!((twice - once).abs() <= 1.0);
        prop_assert!(twice >= once - 1e-12);
    }
}
