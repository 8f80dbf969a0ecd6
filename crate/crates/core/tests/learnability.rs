use petl_core::backbone::{ArchConfig, Backbone, Head, HeadConfig};
use petl_core::harness::{chance_accuracy, evaluate, generate_task, train, TaskKind, TaskSpec, TrainConfig};
use petl_core::petl::{AdaptedModel, Method};

fn genre_task(planted_rank: usize) -> TaskSpec {
    let mut spec = TaskSpec::new(TaskKind::Genre, 32);
    spec.seq_len = 8;
    spec.n_train = 64;
    spec.n_val = 16;
    spec.n_test = 256;
    spec.seed = 11;
    spec.planted_rank = planted_rank;
    spec
}

fn model(method: Method) -> (AdaptedModel<f32>, Head<f32>) {
    let base = Backbone::<f32>::build(ArchConfig::transformer(32, 2, 4), 3).unwrap();
    let model = AdaptedModel::inject(base, method).unwrap();
    let head = Head::new(HeadConfig::new(10, TaskKind::Genre.output_kind()), 32, 5).unwrap();
    (model, head)
}

#[test]
fn every_method_learns_the_planted_genre_task() {
    let data = generate_task(&genre_task(8)).unwrap();
    let cfg = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    for method in Method::table_rows() {
        let (model, head) = model(method);
        let h = train(&model, &head, &data, &cfg).unwrap();
        let ratio = h.final_train_loss / h.initial_train_loss;
        let bound = if method == Method::Probing { 0.8 } else { 0.5 };
        assert!(ratio < bound, "{}: loss ratio {ratio:.3}", method.label());
    }
}

#[test]
fn nothing_generalizes_without_a_planted_signal() {
    let data = generate_task(&genre_task(0)).unwrap();
    let cfg = TrainConfig {
        steps: 100,
        ..TrainConfig::default()
    };
    let chance = chance_accuracy(TaskKind::Genre).unwrap();
    for method in [Method::Probing, petl_core::petl::PetlConfig::lora().into()] {
        let (model, head) = model(method);
        train(&model, &head, &data, &cfg).unwrap();
        let acc = evaluate(&model, &head, &data, &data.test, 0, 0).unwrap().value;
        assert!(acc < chance + 0.1, "{}: {acc} vs chance {chance}", method.label());
    }
}
