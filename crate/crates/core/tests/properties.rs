use alignpeft::data::{self, domain_shift, TaskSpec};
use alignpeft::harness::{pretrain, PretrainConfig};
use alignpeft::model::{accuracy, DualEncoderParams};

fn zero_shot_model() -> DualEncoderParams {
    let config = PretrainConfig {
        model: Default::default(),
        corpus: TaskSpec::new(12, 10, 0.1, 3),
        steps: 150,
        batch_classes: 12,
        learning_rate: 1e-3,
        weight_decay: 0.0,
        seed: 5,
    };
    pretrain(&config).unwrap().params
}

#[test]
fn shifted_zero_shot_accuracy_is_not_higher_on_average() {
    let zs = zero_shot_model();
    let seeds = 0..6u64;
    let (mut clean, mut shifted) = (0.0, 0.0);
    for s in seeds.clone() {
        let ds = data::generate(&TaskSpec::new(12, 20, 0.1, 100 + s)).unwrap();
        let moved = domain_shift(&ds, 0.5, s).unwrap();
        let prompts = ds.class_prompts();
        clean += accuracy(&zs, &ds.test.images, &ds.test.labels, &prompts).unwrap();
        shifted += accuracy(&zs, &moved.test.images, &moved.test.labels, &prompts).unwrap();
    }
    let n = seeds.count() as f64;
    let (clean, shifted) = (clean / n, shifted / n);
    assert!(clean > 1.0 / 12.0, "zero-shot model is at chance ({clean})");
    assert!(shifted <= clean, "shifted {shifted} > clean {clean}");
}
