use crossview::data::synth::SynthWorld;
use crossview::metadata::RawMetadata;
use crossview::models::{Architecture, CrossViewModel, ModelConfig};
use crossview::retrieval::{
    build_index, hierarchical_retrieve, recall_at_k, unimodal_retrieve, CorpusItem, EmbeddingIndex, IndexItem, Modality, RetrievalResult,
};
use crossview::rng::stream;
use crossview::{Error, Image64};
use rand::Rng;
use rand_distr::StandardNormal;

fn corpus(n: usize) -> (Vec<Image64>, Vec<u32>, Vec<Option<RawMetadata>>) {
    let world = SynthWorld::new(3, 4, 4, [0.0, 0.0, 10.0, 10.0]).unwrap();
    let mut r = stream(11, "corpus");
    let species: Vec<u32> = (0..n as u32).map(|i| i % 4).collect();
    let images = species.iter().map(|&s| world.render_ground(s as usize, 32, &mut r).cast()).collect();
    let metas = (0..n).map(|i| Some(RawMetadata { latitude: i as f64, longitude: 2.0, month: 1 + (i % 12) as u32 })).collect();
    (images, species, metas)
}

fn items<'a>(ids: &'a [String], images: &'a [Image64], species: &[u32], metas: &[Option<RawMetadata>]) -> Vec<IndexItem<'a, f64>> {
    (0..ids.len()).map(|i| IndexItem { id: &ids[i], species: species[i], image: &images[i], meta: metas[i] }).collect()
}

#[test]
fn index_rows_are_unit_and_deterministic() {
    let model = CrossViewModel::<f64>::init(ModelConfig::desk(Architecture::CveMeta), 4).unwrap();
    let (mut images, species, metas) = corpus(70);
    images[69] = images[3].clone();
    let ids: Vec<String> = (0..70).map(|i| format!("obs-{i:03}")).collect();
    let a = build_index(&model, &items(&ids, &images, &species, &metas), Modality::Ground, "abc").unwrap();
    let b = build_index(&model, &items(&ids, &images, &species, &metas), Modality::Ground, "abc").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 70);
    for i in 0..a.len() {
        let n: f64 = a.row(i).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert_eq!(a.row(3), a.row(69));
    let s = build_index(&model, &items(&ids, &images, &species, &metas), Modality::Satellite, "abc").unwrap();
    assert_eq!(s.modality, Modality::Satellite);
}

#[test]
fn cross_modal_checkpoint_is_rejected() {
    let model = CrossViewModel::<f64>::init(ModelConfig::desk(Architecture::Cvm), 4).unwrap();
    let (images, species, metas) = corpus(2);
    let ids = vec!["a".to_string(), "b".to_string()];
    let err = build_index(&model, &items(&ids, &images, &species, &metas), Modality::Ground, "").unwrap_err();
    assert!(matches!(err, Error::UnsupportedArchitecture(_)));
}

#[test]
fn hierarchical_results_stay_within_stage_one() {
    let cve = CrossViewModel::<f64>::init(ModelConfig::desk(Architecture::Cve), 1).unwrap();
    let cvm = CrossViewModel::<f64>::init(ModelConfig::desk(Architecture::CvmMeta), 2).unwrap();
    let (images, species, metas) = corpus(24);
    let ids: Vec<String> = (0..24).map(|i| format!("obs-{i:03}")).collect();
    let index = build_index(&cve, &items(&ids, &images, &species, &metas), Modality::Ground, "").unwrap();
    let world = SynthWorld::new(3, 4, 4, [0.0, 0.0, 10.0, 10.0]).unwrap();
    let query = world.render_satellite(1, 32, &mut stream(5, "q")).cast();
    let corpus: Vec<CorpusItem<'_, f64>> = images.iter().zip(&metas).map(|(image, &meta)| CorpusItem { image, meta }).collect();
    let q = crossview::models::embed_satellite(&cve, std::slice::from_ref(&query), &[None]).unwrap();
    let q32: Vec<f32> = q.row(0).iter().map(|&v| v as f32).collect();
    for (m, k) in [(10, 3), (5, 5), (24, 24)] {
        let stage1 = unimodal_retrieve("q", &q32, &index, m).unwrap();
        let res = hierarchical_retrieve("q", &query, None, &corpus, &index, &cve, &cvm, m, k).unwrap();
        assert_eq!(res.ids.len(), k);
        assert!(res.ids.iter().all(|id| stage1.ids.contains(id)));
        assert!(res.scores.windows(2).all(|w| w[0] >= w[1]));
        if m == k {
            let (mut a, mut b) = (res.ids.clone(), stage1.ids.clone());
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }
    let err = hierarchical_retrieve("q", &query, None, &corpus, &index, &cve, &cvm, 3, 4).unwrap_err();
    assert!(matches!(err, Error::Range { .. }));
    assert!(hierarchical_retrieve("q", &query, None, &corpus, &index, &cve, &cve, 5, 4).is_err());
}

fn orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = stream(seed, "rot");
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    basis
}

#[test]
fn retrieval_is_rotation_invariant() {
    let (n, d) = (200, 16);
    let mut r = stream(8, "rows");
    let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| r.sample::<f32, _>(StandardNormal)).collect()).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("{i:05}")).collect();
    let species = vec![0; n];
    let q: Vec<f32> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let rot = orthogonal(d, 3);
    let apply = |v: &[f32]| -> Vec<f32> { rot.iter().map(|row| row.iter().zip(v).map(|(a, &b)| a * f64::from(b)).sum::<f64>() as f32).collect() };
    let plain = EmbeddingIndex::from_rows(rows.clone(), ids.clone(), species.clone(), Modality::Ground, String::new()).unwrap();
    let rotated = EmbeddingIndex::from_rows(rows.iter().map(|v| apply(v)).collect(), ids, species, Modality::Ground, String::new()).unwrap();
    let a = unimodal_retrieve("q", &q, &plain, 20).unwrap();
    let b = unimodal_retrieve("q", &apply(&q), &rotated, 20).unwrap();
    assert_eq!(a.ids, b.ids);
    for (x, y) in a.scores.iter().zip(&b.scores) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn recall_is_monotone_in_k() {
    let mut r = stream(4, "rec");
    let n = 60;
    let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..6).map(|_| r.sample::<f32, _>(StandardNormal)).collect()).collect();
    let species: Vec<u32> = (0..n).map(|_| r.random_range(0..8)).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("{i:03}")).collect();
    let index = EmbeddingIndex::from_rows(rows, ids, species, Modality::Ground, String::new()).unwrap();
    let queries: Vec<(Vec<f32>, u32)> = (0..30).map(|_| ((0..6).map(|_| r.sample(StandardNormal)).collect(), r.random_range(0..9))).collect();
    let results: Vec<RetrievalResult> = queries.iter().enumerate().map(|(i, (q, _))| unimodal_retrieve(&format!("q{i}"), q, &index, n).unwrap()).collect();
    let qs: Vec<u32> = queries.iter().map(|q| q.1).collect();
    let mut prev = 0.0;
    for k in 1..=n {
        let rk = recall_at_k(&results, &qs, &index, k).unwrap();
        assert!(rk >= prev);
        prev = rk;
    }
}
