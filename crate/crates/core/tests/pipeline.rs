use fvg_core::model::{base_hash, save_adapters, save_checkpoint, ModelConfig};
use fvg_core::sample::{run_factorized_pipeline, sample_t2v, Mode, SampleConfig, VideoModel};
use fvg_core::prompt::{serialize_prompt, tokenize, parse_prompt};
use fvg_core::scene::{gen_dataset, load_dataset, Dataset};
use fvg_core::train::{finetune_from_file, pretrain_t2v, TrainConfig};
use fvg_core::Error;
use ndarray::Axis;

fn tiny_train() -> TrainConfig {
    TrainConfig { batch: 2, steps_pretrain: 3, steps_finetune: 3, log_every: 1, ..Default::default() }
}

fn dataset(dir: &std::path::Path) -> Dataset {
    gen_dataset(8, 3, dir).unwrap();
    load_dataset(dir).unwrap()
}

#[test]
fn train_save_load_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"));
    let cfg = ModelConfig::default();
    let train = tiny_train();

    let a = pretrain_t2v::<f32>(&ds, &cfg, &train, 5, None).unwrap();
    let b = pretrain_t2v::<f32>(&ds, &cfg, &train, 5, None).unwrap();
    assert_eq!(a.losses, b.losses);
    let base = dir.path().join("base.fvgc");
    let base2 = dir.path().join("base2.fvgc");
    save_checkpoint(&a.checkpoint, &base).unwrap();
    save_checkpoint(&b.checkpoint, &base2).unwrap();
    assert_eq!(std::fs::read(&base).unwrap(), std::fs::read(&base2).unwrap());

    let ft = finetune_from_file(&base, &a.checkpoint, &ds, &train, 6, None).unwrap();
    let lora = dir.path().join("lora.fvgc");
    let ck = &ft.checkpoint;
    save_adapters(ck.adapters.as_ref().unwrap(), &ck.config, &base_hash(&base).unwrap(), ck.meta.clone(), &lora).unwrap();

    let model = VideoModel::load(&base, Some(&lora)).unwrap();
    let sc = SampleConfig { steps: 4, cfg_scale: 2.0, mode: Mode::Factorized, seed: 9 };
    let prompt = "green triangle at top-right moves left; red circle at bottom-center";
    let (v1, anchor, ast) = run_factorized_pipeline(&model, prompt, 1, &sc).unwrap();
    let (v2, _, _) = run_factorized_pipeline(&model, prompt, 1, &sc).unwrap();
    assert_eq!(v1, v2);
    assert_eq!(v1.index_axis(Axis(0), 0), anchor);
    assert_eq!(ast, parse_prompt(prompt).unwrap());

    let tokens = tokenize(&serialize_prompt(&ast)).unwrap();
    let t = sample_t2v(&model, &tokens, &SampleConfig { mode: Mode::T2v, ..sc.clone() }).unwrap();
    assert!(t.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn adapters_refuse_a_different_base() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"));
    let cfg = ModelConfig::default();
    let train = tiny_train();
    let a = pretrain_t2v::<f32>(&ds, &cfg, &train, 1, None).unwrap();
    let b = pretrain_t2v::<f32>(&ds, &cfg, &train, 2, None).unwrap();
    let (pa, pb) = (dir.path().join("a.fvgc"), dir.path().join("b.fvgc"));
    save_checkpoint(&a.checkpoint, &pa).unwrap();
    save_checkpoint(&b.checkpoint, &pb).unwrap();
    let ft = finetune_from_file(&pa, &a.checkpoint, &ds, &train, 3, None).unwrap();
    let lora = dir.path().join("lora.fvgc");
    let ck = &ft.checkpoint;
    save_adapters(ck.adapters.as_ref().unwrap(), &ck.config, &base_hash(&pa).unwrap(), ck.meta.clone(), &lora).unwrap();

    assert!(VideoModel::load(&pa, Some(&lora)).is_ok());
    assert!(matches!(VideoModel::load(&pb, Some(&lora)), Err(Error::HashMismatch { .. })));
    assert!(matches!(VideoModel::load(&dir.path().join("none.fvgc"), None), Err(Error::MissingArtifact(_))));
}
