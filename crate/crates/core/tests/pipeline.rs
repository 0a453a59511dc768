use ignet_core::backprop::{backward, gradient_check};
use ignet_core::config::{Config, Preset};
use ignet_core::data::{load_dir, save_dir, synth_dataset, CodeTable};
use ignet_core::init::{init_weights, InitAmplitudes};
use ignet_core::model_io::{decode_model, encode_model, Model};
use ignet_core::net::{build_network, Activation, LayerSpec, Loss, PresetOptions};
use ignet_core::parallel::WorkerPool;
use ignet_core::regularize::Resample;
use ignet_core::seeds::stream;
use ignet_core::tensor::Dims;
use ignet_core::train::{build_examples, evaluate, train, ExampleSpec, Task, TrainConfig};
use proptest::prelude::*;
use rand::Rng;

fn quick_config(task: Task) -> Config {
    let text = format!(
        "run.task = {task}\nrun.seed = 4\ndata.rows = 12\ndata.cols = 16\nnet.filters = 2\nnet.filter = 3x3\n\
         net.freezeconnect = 0.2\nnet.freeze_resample = per_epoch\n\
         init.1.W = 5\ninit.1.B = 0.1\ninit.2.W = 10\ninit.2.B = 0\n\
         opt.kind = nag\nopt.batch = 8\ncv.folds = 3\ncv.repeats = 2\naug.multiplier = 2\naug.rotation = 4\n"
    );
    Config::parse(&text).unwrap()
}

#[test]
fn dataset_to_model_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(Task::Classify);
    save_dir(dir.path(), &synth_dataset(3, 6, 24, 32, 8).unwrap()).unwrap();
    let samples = load_dir(dir.path(), &CodeTable::default(), Some((cfg.rows, cfg.cols))).unwrap();
    assert_eq!(samples.len(), 18);

    let spec = ExampleSpec {
        task: cfg.task,
        encoder: cfg.encoder.clone(),
        target_scale: cfg.target_scale,
        augment: cfg.augment,
        seed: cfg.seed,
    };
    let (examples, table) = build_examples::<f64>(&samples, &spec, None).unwrap();
    assert_eq!(examples.len(), 36);
    let mut resolved = cfg.clone();
    resolved.layers = cfg.resolved_layers(table.len());
    let mut net = build_network::<f64>(&resolved.layers, resolved.loss(), Dims::new(1, 12, 16)).unwrap();
    init_weights(&mut net, &resolved.amplitudes().unwrap(), &mut stream(1, &[])).unwrap();
    let tc = TrainConfig {
        cv: cfg.cv,
        opt: cfg.opt,
        task: cfg.task,
        seed: cfg.seed,
    };
    let report = train(&mut net, &examples, &tc, &WorkerPool::new(2)).unwrap();
    assert!(report.history.records.len() <= 6);

    let model = Model {
        config: resolved,
        table,
        network: net,
    };
    let back = decode_model(&encode_model(&model)).unwrap();
    assert_eq!(back, model);
    let m1 = evaluate(&model.network, &examples, Task::Classify).unwrap();
    let m2 = evaluate(&back.network, &examples, Task::Classify).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn regression_targets_follow_target_scale() {
    let cfg = quick_config(Task::Regress);
    let samples = synth_dataset(2, 3, 12, 16, 1).unwrap();
    let spec = ExampleSpec {
        task: Task::Regress,
        encoder: cfg.encoder.clone(),
        target_scale: 50.0,
        augment: Default::default(),
        seed: 0,
    };
    let (examples, _) = build_examples::<f64>(&samples, &spec, None).unwrap();
    for (e, s) in examples.iter().zip(&samples) {
        assert_eq!(e.target, vec![f64::from(s.label.age_months) / 50.0]);
    }
}

#[test]
fn the_core_runs_in_single_precision() {
    let specs = [
        LayerSpec::conv(2, 3, 3, Activation::Sigmoid),
        LayerSpec::dense(3, Activation::Identity),
        LayerSpec::softmax(),
    ];
    let mut net = build_network::<f32>(&specs, Loss::CrossEntropy, Dims::new(1, 8, 8)).unwrap();
    init_weights(&mut net, &InitAmplitudes::uniform(2, 1.5, 0.2), &mut stream(2, &[])).unwrap();
    let mut rng = stream(3, &[]);
    let x = ignet_core::tensor::FeatureMap::<f32>::from_fn(Dims::new(1, 8, 8), |_, _, _| rng.gen());
    let target = vec![0.0f32, 1.0, 0.0];
    let g = backward(&net, &net.forward(&x, ignet_core::regularize::Mode::Inference, &mut rng).unwrap(), &target).unwrap();
    assert!(g.is_finite());
    gradient_check(&net, &[(x, target)], 1e-2f32, 5e-2).unwrap();
}

fn arb_preset() -> impl Strategy<Value = Config> {
    (
        prop_oneof![Just(Preset::Shallow), Just(Preset::Deep)],
        prop_oneof![Just(Task::Classify), Just(Task::Regress)],
        1usize..5,
        1usize..6,
        1usize..6,
        prop::option::of((0.0f64..0.9, prop_oneof![Just(Resample::PerRun), Just(Resample::PerEpoch), Just(Resample::PerBatch)])),
        any::<u64>(),
        (0.001f64..10.0, 0.0f64..2.0),
    )
        .prop_map(|(preset, task, filters, v, h, freeze, seed, (w, b))| {
            let opts = PresetOptions {
                filters,
                filter_v: v,
                filter_h: h,
                freezeconnect: freeze,
                ..PresetOptions::default()
            };
            let mut c = Config::from_preset(preset, &opts, task);
            c.seed = seed;
            c.init_default.weight = w;
            c.init_default.bias = b;
            c
        })
}

proptest! {
    #[test]
    fn rendered_configs_parse_back(cfg in arb_preset()) {
        let text = cfg.render();
        prop_assert_eq!(Config::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn config_parsing_never_panics(text in "[a-z0-9._= #\\n]{0,120}") {
        let _ = Config::parse(&text);
    }

    #[test]
    fn truncated_models_are_rejected(cut in 0usize..1000) {
        let cfg = quick_config(Task::Regress);
        let mut resolved = cfg.clone();
        resolved.layers = cfg.resolved_layers(1);
        let samples = synth_dataset(2, 2, 12, 16, 0).unwrap();
        let labels: Vec<_> = samples.iter().map(|s| s.label.clone()).collect();
        let table = ignet_core::data::CategoryTable::from_records(&labels, &cfg.encoder).unwrap();
        let network = build_network::<f64>(&resolved.layers, resolved.loss(), Dims::new(1, 12, 16)).unwrap();
        let bytes = encode_model(&Model { config: resolved, table, network });
        let cut = cut % bytes.len();
        prop_assert!(decode_model(&bytes[..cut]).is_err());
    }
}
