use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mialab::experiment::{ActiveKind, Attacker, DatasetSpec};
use mialab::nn::{LayerSpec, Network};
use mialab::presets::standalone;
use mialab::snapshot::ModelSnapshot;
use mialab_ffi::*;

fn last_error() -> String {
    let p = mialab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &Path) -> (CString, Network) {
    let net = Network::new(
        vec![LayerSpec::dense(3, 5), LayerSpec::Relu, LayerSpec::dense(5, 4)],
        11,
    )
    .unwrap();
    let path = dir.join("m.snap");
    ModelSnapshot::from_network(&net, 7).save(&path).unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), net)
}

#[test]
fn model_forward_and_grad_norm_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, net) = saved_model(dir.path());
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(mialab_model_load(path.as_ptr(), &mut model), MialabStatus::Ok);
        let (mut d, mut k) = (0, 0);
        assert_eq!(mialab_model_dims(model, &mut d, &mut k), MialabStatus::Ok);
        assert_eq!((d, k), (3, 4));

        let x = [0.3, -1.2, 0.8];
        let mut probs = [0.0; 4];
        assert_eq!(mialab_model_forward(model, x.as_ptr(), 3, probs.as_mut_ptr(), 4), MialabStatus::Ok);
        let xt = mialab::Tensor::vector(x.to_vec());
        assert_eq!(probs.as_slice(), net.forward(&xt, false, 0).unwrap().probs.data());

        let (mut loss, mut norm) = (0.0, 0.0);
        assert_eq!(
            mialab_model_loss_grad_norm(model, x.as_ptr(), 3, 2, &mut loss, &mut norm),
            MialabStatus::Ok
        );
        let (trace, grads) = net.loss_and_backward(&xt, 2).unwrap();
        assert_eq!(loss, trace.loss.unwrap());
        assert_eq!(norm, mialab::nn::gradient_norm(&grads, mialab::nn::LayerSelector::Last).unwrap());

        assert_eq!(
            mialab_model_forward(model, x.as_ptr(), 2, probs.as_mut_ptr(), 4),
            MialabStatus::Dimension
        );
        assert!(last_error().contains("expects 3"));
        assert_eq!(
            mialab_model_loss_grad_norm(model, x.as_ptr(), 3, 9, &mut loss, &mut norm),
            MialabStatus::InvalidArgument
        );
        mialab_model_free(model);
    }
}

#[test]
fn null_and_missing_inputs_are_reported() {
    unsafe {
        assert_eq!(mialab_model_load(ptr::null(), &mut ptr::null_mut()), MialabStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/m.snap").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(mialab_model_load(missing.as_ptr(), &mut model), MialabStatus::Io);
        assert!(model.is_null());
        assert_eq!(mialab_evaluate(ptr::null(), ptr::null(), 0, 0.5, ptr::null_mut()), MialabStatus::NullPointer);
        mialab_model_free(ptr::null_mut());
        mialab_string_free(ptr::null_mut());
    }
}

#[test]
fn evaluate_counts() {
    let scores = [0.9, 0.2, 0.6, 0.4];
    let truth = [1u8, 0, 0, 1];
    let mut e = MialabEval::default();
    unsafe {
        assert_eq!(mialab_evaluate(scores.as_ptr(), truth.as_ptr(), 4, 0.5, &mut e), MialabStatus::Ok);
    }
    assert_eq!((e.members, e.nonmembers), (2, 2));
    assert_eq!((e.accuracy, e.tpr, e.fpr), (0.5, 0.5, 0.5));
    assert_eq!(e.auc, 0.75);
}

#[test]
fn presets_are_listed() {
    let n = mialab_preset_count();
    assert!(n >= 9);
    let mut names = Vec::new();
    for i in 0..n {
        let mut s = ptr::null_mut();
        unsafe {
            assert_eq!(mialab_preset_name(i, &mut s), MialabStatus::Ok);
            names.push(CStr::from_ptr(s).to_str().unwrap().to_string());
            mialab_string_free(s);
        }
    }
    assert!(names.contains(&"fed-active-isolate".to_string()));
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { mialab_preset_name(n, &mut s) }, MialabStatus::InvalidArgument);
}

#[test]
fn invalid_experiment_is_a_config_error() {
    let mut cfg = standalone(mialab::attack::Knowledge::Supervised, "bad");
    cfg.attacker = Attacker::Active(ActiveKind::Isolate);
    let json = CString::new(serde_json::to_string(&cfg).unwrap()).unwrap();
    let mut exp = ptr::null_mut();
    unsafe {
        assert_eq!(mialab_experiment_from_json(json.as_ptr(), &mut exp), MialabStatus::Config);
        assert!(last_error().contains("active requires federated"));
        let junk = CString::new("{").unwrap();
        assert_eq!(mialab_experiment_from_json(junk.as_ptr(), &mut exp), MialabStatus::Config);
        let unknown = CString::new("no-such-preset").unwrap();
        assert_eq!(mialab_experiment_from_preset(unknown.as_ptr(), &mut exp), MialabStatus::Config);
    }
    assert!(exp.is_null());
}

#[test]
fn small_experiment_runs_through_the_handles() {
    let mut cfg = standalone(mialab::attack::Knowledge::Supervised, "small");
    cfg.dataset = DatasetSpec::Synthetic {
        n: 500,
        dim: 16,
        classes: 4,
        spread: 0.3,
    };
    cfg.target.layer_sizes = vec![16, 24, 4];
    cfg.target.epochs = 5;
    cfg.split = mialab::data::SplitSizes {
        target_train: 120,
        target_test: 100,
        attack_train_members: 30,
        attack_train_nonmembers: 30,
        attack_test_members: 20,
        attack_test_nonmembers: 20,
        finetune: 0,
    };
    cfg.attack_arch.conv_kernels = 2;
    cfg.attack_train.epochs = 2;
    let json = CString::new(serde_json::to_string(&cfg).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out_dir = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut exp = ptr::null_mut();
        assert_eq!(mialab_experiment_from_json(json.as_ptr(), &mut exp), MialabStatus::Ok);
        assert_eq!(mialab_experiment_set_seed(exp, 3), MialabStatus::Ok);
        assert_eq!(mialab_experiment_set_output_dir(exp, out_dir.as_ptr()), MialabStatus::Ok);
        let mut summary = ptr::null_mut();
        assert_eq!(mialab_experiment_run(exp, &mut summary), MialabStatus::Ok, "{}", last_error());
        let (mut runs, mut attacks) = (0, 0);
        assert_eq!(mialab_summary_counts(summary, 0, &mut runs, &mut attacks), MialabStatus::Ok);
        assert_eq!((runs, attacks), (1, 1));
        let mut e = MialabEval::default();
        assert_eq!(mialab_summary_eval(summary, 0, 0, &mut e), MialabStatus::Ok);
        assert_eq!((e.members, e.nonmembers), (20, 20));
        assert!((0.0..=1.0).contains(&e.accuracy));
        let mut text = ptr::null_mut();
        assert_eq!(mialab_summary_json(summary, &mut text), MialabStatus::Ok);
        let parsed: serde_json::Value = serde_json::from_str(CStr::from_ptr(text).to_str().unwrap()).unwrap();
        assert_eq!(parsed["seed"], 3);
        mialab_string_free(text);
        assert_eq!(mialab_summary_eval(summary, 0, 5, &mut e), MialabStatus::InvalidArgument);
        mialab_summary_free(summary);
        mialab_experiment_free(exp);
    }
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn header_declares_the_api_and_compiles() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("mialab.h")).unwrap();
    for f in [
        "mialab_last_error",
        "mialab_model_load",
        "mialab_model_forward",
        "mialab_model_loss_grad_norm",
        "mialab_evaluate",
        "mialab_experiment_run",
        "mialab_summary_free",
        "MIALAB_STATUS_CONFIG",
    ] {
        assert!(header.contains(f), "{f} missing from the header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mialab.h\"\nint main(void) {\n  MialabExperiment *e = NULL;\n  \
         MialabStatus s = mialab_experiment_from_preset(\"standalone-supervised\", &e);\n  \
         mialab_experiment_free(e);\n  return s == MIALAB_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc).arg("-fsyntax-only").arg("-I").arg(&include).arg(&src).status() {
        Ok(status) => assert!(status.success(), "header does not compile"),
        Err(e) => eprintln!("skipping C compile check, {cc} unavailable: {e}"),
    }
}
