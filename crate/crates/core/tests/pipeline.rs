use spkadapt::harness::{evaluate, median, load_dataset, train_seen, DataSource, ExperimentSpec, NetworkShape, Oracle};
use spkadapt::layers::Activation;
use spkadapt::model::{InjectionMode, Network, SpeakerId, Strategy};
use spkadapt::synthgen::{generate, GenConfig, Split, SpeakerDataset, VariationMode};
use spkadapt::training::{adapt_speaker, AdaptConfig, Frame, TrainConfig};

fn small_data(mode: VariationMode, noise_sigma: f64) -> GenConfig {
    GenConfig {
        num_seen_speakers: 6,
        num_unseen_speakers: 2,
        train_frames: 150,
        valid_frames: 50,
        test_frames: 100,
        adapt_frames: 40,
        mode,
        noise_sigma,
        seed: 11,
        ..GenConfig::default()
    }
}

fn small_spec(data: GenConfig) -> ExperimentSpec {
    ExperimentSpec {
        data: DataSource::Generate(data),
        network: NetworkShape {
            width: 16,
            depth: 2,
            hidden_activation: Activation::Sigmoid,
        },
        train: TrainConfig {
            epochs: 150,
            ..TrainConfig::default()
        },
        ..ExperimentSpec::default()
    }
}

fn relabel(frames: &[Frame], id: SpeakerId) -> Vec<Frame> {
    frames.iter().map(|f| Frame { speaker: id, ..f.clone() }).collect()
}

#[test]
fn adapting_to_a_seen_speakers_held_out_data_recovers_its_accuracy() {
    let spec = small_spec(small_data(VariationMode::Affine, 0.05));
    let (data, _) = load_dataset(&spec.data).unwrap();
    let (net, _) = train_seen(&data, &spec, Strategy::Affine { p: 4, q: 4 }, InjectionMode::Nonlinear, 0).unwrap();

    let target = data.seen[0];
    let valid = data.speaker_frames(target, Split::Valid);
    let reference = evaluate(&net, &valid).unwrap().mean;

    // The same speaker's test slice, presented as a new speaker.
    let clone_id = SpeakerId(1000);
    let mut adapted = net.clone();
    let cfg = AdaptConfig::default_for(adapted.strategy(), spec.adapt.train.clone());
    adapt_speaker(
        &mut adapted,
        clone_id,
        &relabel(&data.speaker_frames(target, Split::Test), clone_id),
        &relabel(&valid, clone_id),
        &cfg,
    )
    .unwrap();
    let recovered = evaluate(&adapted, &relabel(&valid, clone_id)).unwrap().mean;
    assert!(
        recovered <= 1.25 * reference,
        "adapted {recovered:.4} vs multi-speaker {reference:.4}"
    );
}

#[test]
fn oracle_scores_zero_on_reloaded_noise_free_data() {
    let data = generate(&small_data(VariationMode::Scale, 0.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let hash = data.save(dir.path()).unwrap();
    let loaded = SpeakerDataset::load(dir.path()).unwrap();
    assert_eq!(loaded.content_hash().unwrap(), hash);
    let all: Vec<SpeakerId> = loaded.seen.iter().chain(&loaded.unseen).copied().collect();
    for split in [Split::Train, Split::Valid, Split::Test, Split::Adapt] {
        let frames = loaded.frames(split, &all);
        assert_eq!(evaluate(&Oracle(&loaded), &frames).unwrap().mean, 0.0, "{}", split.name());
    }
}

#[test]
fn checkpoint_reload_preserves_metrics_exactly() {
    let spec = small_spec(small_data(VariationMode::Bias, 0.05));
    let (data, _) = load_dataset(&spec.data).unwrap();
    let spec = ExperimentSpec {
        train: TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        },
        ..spec
    };
    let (net, _) = train_seen(&data, &spec, Strategy::Level { p: 2, q: 2 }, InjectionMode::Linear, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    net.save(&path).unwrap();
    let loaded = Network::load(&path).unwrap();
    let frames = data.seen_frames(Split::Test);
    assert_eq!(evaluate(&net, &frames).unwrap(), evaluate(&loaded, &frames).unwrap());
}

#[test]
fn learned_models_do_not_beat_the_noise_floor() {
    let spec = small_spec(small_data(VariationMode::Affine, 0.1));
    let (data, _) = load_dataset(&spec.data).unwrap();
    let floor = spkadapt::synthgen::oracle_rmse_floor(&data.config);
    let rmse: Vec<f64> = (0..3)
        .map(|seed| {
            let (net, _) = train_seen(&data, &spec, Strategy::Affine { p: 4, q: 4 }, InjectionMode::Linear, seed).unwrap();
            evaluate(&net, &data.seen_frames(Split::Test)).unwrap().mean
        })
        .collect();
    assert!(median(rmse.clone()).unwrap() >= floor, "{rmse:?}");
}
