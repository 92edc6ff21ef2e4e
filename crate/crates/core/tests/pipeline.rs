use segcls::data_model::{labels_to_regions, load_case_files, regions_to_labels, DatasetManifest};
use segcls::inference::{predict_case, InferenceConfig, Predictor};
use segcls::metrics::{evaluate_case, evaluate_dataset};
use segcls::networks::{Network, NetworkConfig};
use segcls::nifti::{self, DataType};
use segcls::synth::{generate_case, write_dataset, SynthConfig};

#[test]
fn written_dataset_reloads_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_cases: 2, shape: [24, 20, 16], seed: 4, ..Default::default() };
    write_dataset(&cfg, tmp.path()).unwrap();
    let manifest = DatasetManifest::load(tmp.path().join("dataset.toml")).unwrap();
    assert_eq!(manifest.ids(), ["synth_000", "synth_001"]);
    for (i, id) in manifest.ids().iter().enumerate() {
        let (v, l) = load_case_files(manifest.get(id).unwrap()).unwrap();
        let want = generate_case(&cfg, i).unwrap();
        assert_eq!(v.to_channels(), want.volume.to_channels());
        assert_eq!(l.unwrap(), want.labels);
        assert_eq!(v.dims(), [24, 20, 16]);
    }
}

#[test]
fn untrained_network_predicts_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_cases: 1, shape: [20, 20, 20], ..Default::default() };
    let case = generate_case(&cfg, 0).unwrap();
    let net = Network::<f32>::new(NetworkConfig::bifpn_reduced(), 1).unwrap();
    let models: [&dyn Predictor; 1] = [&net];
    let icfg = InferenceConfig { tta_flips: vec![[false; 3]], write_probabilities: true, ..Default::default() };
    let pred = predict_case(&case.volume, &models, &icfg).unwrap();
    assert_eq!(pred.labels.dims(), [20, 20, 20]);
    assert_eq!(regions_to_labels(&pred.regions), pred.labels);
    assert!(labels_to_regions(&pred.labels).is_nested());
    assert!(pred.probabilities.is_some());

    let m = evaluate_case(&pred.labels, &case.labels, [1.0; 3]).unwrap();
    assert!(m.dice.iter().all(|d| (0.0..=1.0).contains(d)));

    let (pd, gd) = (tmp.path().join("pred"), tmp.path().join("gt"));
    std::fs::create_dir_all(&pd).unwrap();
    std::fs::create_dir_all(&gd).unwrap();
    let header = nifti::NiftiHeader::for_volume([20, 20, 20], [1.0; 3]);
    for (dir, lv) in [(&pd, &pred.labels), (&gd, &case.labels)] {
        let data: Vec<f64> = lv.grid().data().iter().map(|&v| f64::from(v)).collect();
        nifti::write(dir.join("synth_000.nii.gz"), &header, &[20, 20, 20], &data, DataType::Uint8).unwrap();
    }
    let eval = evaluate_dataset(&pd, &gd).unwrap();
    assert!(eval.is_complete());
    assert_eq!(eval.cases[0].1, m);
}
