use rtgen::dataset::{write_pairs_to, CorpusManifest, CorpusRecord, ImageRef, Provenance};
use rtgen::pipeline::{phrase_pool, run_r2t, run_t2r, t2r_image, PipelineConfig, Runtime};
use rtgen::providers::synth::SynthScene;
use rtgen::providers::{Color, SynthObject};
use rtgen::BBox;
use rtgen::saig::SaigModel;

fn runtime() -> Runtime {
    Runtime::new(PipelineConfig::default_synthetic()).unwrap()
}

fn untrained(rt: &Runtime) -> SaigModel {
    SaigModel::new(rt.config.saig.model).unwrap()
}

#[test]
fn empty_corpus_yields_nothing() {
    let rt = runtime();
    let corpus = CorpusManifest::new(vec![]).unwrap();
    let r2t = run_r2t(&rt, &corpus).unwrap();
    assert!(r2t.records.is_empty());
    assert_eq!(r2t.stats.proposals, 0);
    let t2r = run_t2r(&rt, &corpus, &untrained(&rt)).unwrap();
    assert!(t2r.records.is_empty());
    assert_eq!(t2r.stats.images, 0);
}

#[test]
fn scene_without_usable_phrases_is_counted() {
    let rt = runtime();
    let mut corpus = rt.corpus().unwrap();
    corpus.records.truncate(1);
    corpus.records[0].caption = "a sunny sunday afternoon".into();
    let out = run_t2r(&rt, &corpus, &untrained(&rt)).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.stats.images, 1);
    assert_eq!(out.stats.no_phrases, 1);
    assert_eq!(out.failed_images, 0);
}

#[test]
fn r2t_counts_reconcile_and_selection_beats_alternatives() {
    let rt = runtime();
    let corpus = rt.corpus().unwrap();
    let out = run_r2t(&rt, &corpus).unwrap();
    let s = &out.stats;
    assert_eq!(out.images, 100);
    assert_eq!(out.records.len(), s.captioned);
    assert_eq!(s.captioned + s.skipped, s.deduped);
    assert!(s.deduped <= s.confident && s.confident <= s.proposals);
    assert!(out.records.iter().all(|r| r.provenance == Provenance::R2t));
    let selected = s.selected_similarity_sum / s.captioned as f64;
    let others = s.other_similarity_sum / s.other_candidates as f64;
    assert!(selected > others, "{selected} vs {others}");
    let ids: Vec<&str> = out.records.iter().map(|r| r.image_id.as_str()).collect();
    assert!(ids.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn t2r_counters_reconcile_and_pairs_show_their_phrase() {
    let rt = runtime();
    let corpus = rt.corpus().unwrap();
    let model = untrained(&rt);
    let items: Vec<&CorpusRecord> = corpus.records.iter().collect();
    let pool = phrase_pool(&rt, &items).unwrap();
    let world = rt.world().unwrap();
    let (mut emitted, mut matching) = (0, 0);
    for rec in &corpus.records {
        let image = rt.load_image(rec).unwrap();
        let out = t2r_image(&rt, &model, &pool, rec, &image).unwrap();
        assert!(out.stats.reconciles(), "{:?}", out.stats);
        assert!(out.records.len() <= rt.config.sampler.max_pairs * rt.config.sampler.samples_per_image);
        for sample in &out.samples {
            let labels = sample.image.labels().unwrap();
            for r in &sample.records {
                emitted += 1;
                let crop = sample.image.crop(&r.bbox);
                let counts = crop.label_counts();
                let dominant = (1..counts.len()).max_by_key(|&i| counts[i]).filter(|&i| counts[i] > 0);
                let named = r.text.split_whitespace().last().unwrap();
                if let Some(i) = dominant {
                    let category = &labels.objects[i - 1].category;
                    matching += usize::from(category == named && world.visible().get(category).is_some());
                }
            }
        }
    }
    assert!(emitted > 0);
    assert!(matching as f64 >= 0.9 * emitted as f64, "{matching}/{emitted}");
}

#[test]
fn generation_is_thread_count_invariant() {
    let mut cfg = PipelineConfig::default_synthetic();
    cfg.corpus.synthetic_scenes = 30;
    let bytes = |threads| {
        let mut c = cfg.clone();
        c.parallelism.threads = threads;
        let rt = Runtime::new(c).unwrap();
        let out = run_r2t(&rt, &rt.corpus().unwrap()).unwrap();
        let mut b = Vec::new();
        write_pairs_to(&out.records, &mut b).unwrap();
        b
    };
    assert_eq!(bytes(1), bytes(3));
}

#[test]
fn novel_objects_are_refused_by_generation() {
    let rt = runtime();
    let world = rt.world().unwrap();
    let novel = world.registry.novel().next().unwrap().clone();
    let scene = SynthScene::new(vec![SynthObject {
        category: novel.name.clone(),
        color: Color::Red,
        bbox: BBox::new(0.2, 0.2, 0.3, 0.3).unwrap(),
    }]);
    let rec = CorpusRecord {
        image_id: "n".into(),
        image_ref: ImageRef::Synth { scene, seed: 1 },
        caption: format!("a red {}", novel.name),
    };
    assert!(rt.load_image(&rec).is_err());
}
