use std::process::Command;

use corep_lab::harness::*;

fn small(steps: usize) -> RunConfig {
    let mut cfg = RunConfig::from_text(
        "# desk-scale run\n\
         env.horizon = 25\n\
         episodes_per_batch = 2\n\
         corep.featurizer_hidden = 16\n\
         corep.encoder_hidden = 16\n\
         corep.decoder_hidden = 8\n\
         policy.hidden = 16\n\
         ppo.epochs = 2\n\
         ppo.minibatch = 25\n\
         detector.capacity = 100\n\
         wall_clock = false\n",
    )
    .unwrap();
    cfg.total_steps = steps;
    cfg
}

fn run_csv(cfg: &RunConfig) -> String {
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    let mut out = Vec::new();
    train(&mut tr, &mut out, None).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn config_text_overrides_and_rejections() {
    let cfg = RunConfig::from_text("seed = 4 # trailing comment\nenv.mode = W-EP\ncorep.tau = auto\n").unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.env.mode.to_string(), "W-EP");
    let mut c = cfg.clone();
    c.apply_overrides(&["variant=no-mag", "lambda1 = 0.5"]).unwrap();
    assert_eq!(c.variant, Variant::NoMag);
    assert_eq!(c.corep.lambda1, 0.5);
    for bad in ["bogus = 1\n", "seed 4\n", "detector.alpha = 0\n", "variant = no-such\n", "corep.nodes = 1\n"] {
        let e = RunConfig::from_text(bad).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{bad}: {e}");
    }
    assert!(matches!("nope".parse::<Variant>(), Err(HarnessError::Config(_))));
}

#[test]
fn zero_steps_writes_only_the_header() {
    assert_eq!(run_csv(&small(0)), format!("{METRICS_HEADER}\n"));
}

#[test]
fn ppo_only_leaves_representation_columns_empty() {
    let mut cfg = small(100);
    cfg.variant = Variant::PpoOnly;
    let csv = run_csv(&cfg);
    let header: Vec<&str> = METRICS_HEADER.split(',').collect();
    let mut lines = csv.lines().skip(1).peekable();
    assert!(lines.peek().is_some());
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), header.len());
        for col in ["L_guide", "L_MAG", "L_sparsity", "L_VAE_recon", "L_VAE_kl", "core_frozen"] {
            let i = header.iter().position(|h| *h == col).unwrap();
            assert_eq!(cells[i], "", "{col}");
        }
    }
}

#[test]
fn every_variant_trains() {
    for v in Variant::ALL {
        let mut cfg = small(100);
        cfg.variant = v;
        let mut tr = Trainer::new(cfg).unwrap();
        let rows = train(&mut tr, std::io::sink(), None).unwrap();
        assert_eq!(rows.len(), 2, "{v}");
        assert!(rows.iter().all(|r| r.l_total.is_finite()), "{v}");
        let has_vae = matches!(v, Variant::Full | Variant::NoCorep | Variant::NoGuide | Variant::NoSparsity | Variant::NoMag | Variant::SingleGat);
        assert_eq!(rows[0].l_vae_recon.is_some(), has_vae, "{v}");
        assert_eq!(rows[0].l_guide.is_some(), matches!(v, Variant::Full | Variant::NoVae | Variant::NoSparsity | Variant::NoMag), "{v}");
    }
}

#[test]
fn same_config_and_seed_give_identical_metrics() {
    let cfg = small(300);
    let a = run_csv(&cfg);
    assert_eq!(a, run_csv(&cfg));
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(a, run_csv(&other));
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let cfg = small(150);
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let rows_a = train(&mut straight, std::io::sink(), None).unwrap();

    let mut first = Trainer::new(RunConfig { total_steps: 100, ..cfg.clone() }).unwrap();
    let mut rows_b = train(&mut first, std::io::sink(), None).unwrap();
    let text = first.checkpoint();
    let mut resumed = Trainer::from_checkpoint(&text, &["total_steps=150"]).unwrap();
    assert_eq!(resumed.checkpoint().replace("total_steps = 150", "total_steps = 100"), text);
    rows_b.extend(train(&mut resumed, std::io::sink(), None).unwrap());

    assert_eq!(rows_a, rows_b);
    assert_eq!(straight.model(), resumed.model());
    assert_eq!(straight.policy(), resumed.policy());
    assert_eq!(straight.checkpoint(), resumed.checkpoint());
}

#[test]
fn checkpoint_rejects_tampering() {
    let mut tr = Trainer::new(small(50)).unwrap();
    train(&mut tr, std::io::sink(), None).unwrap();
    let text = tr.checkpoint();
    assert!(matches!(Trainer::from_checkpoint::<&str>(&text.replace("seed = 0", "seed = 9"), &[]), Err(HarnessError::Checkpoint(_))));
    assert!(matches!(Trainer::from_checkpoint(&text, &["seed=9"]), Err(HarnessError::Config(_))));
    assert!(Trainer::from_checkpoint::<&str>("garbage", &[]).is_err());
}

#[test]
fn checkpoints_are_written_periodically() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(200);
    cfg.checkpoint_every = 2;
    let mut tr = Trainer::new(cfg).unwrap();
    train(&mut tr, std::io::sink(), Some(dir.path())).unwrap();
    let mut names: Vec<String> =
        std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["checkpoint_000002.txt", "checkpoint_000004.txt"]);
}

#[test]
fn held_gate_keeps_core_and_optionally_the_featurizer() {
    for freeze_featurizer in [false, true] {
        let mut cfg = small(200);
        cfg.corep.freeze_featurizer = freeze_featurizer;
        let mut tr = Trainer::new(cfg).unwrap();
        tr.set_gate_mode(GateMode::Frozen);
        let before = tr.model().unwrap().clone();
        train(&mut tr, std::io::sink(), None).unwrap();
        let after = tr.model().unwrap();
        assert_eq!(after.gat.core, before.gat.core);
        assert_ne!(after.gat.general, before.gat.general);
        assert_eq!(after.gat.featurizer == before.gat.featurizer, freeze_featurizer);
        let state = [0.2; 6];
        let same_graph = after.adjacencies(&state).unwrap().0 == before.adjacencies(&state).unwrap().0;
        assert_eq!(same_graph, freeze_featurizer);
    }
}

#[test]
fn full_against_itself_has_unit_ratio() {
    let rows = ablate(&small(100), &[Variant::Full, Variant::PpoOnly]).unwrap();
    assert_eq!(rows[0].normalized, 1.0);
    assert_eq!(rows[1].variant, Variant::PpoOnly);
    assert!(rows[1].normalized.is_finite() && rows[1].normalized > 0.0);
    assert!(ablate(&small(100), &[]).is_err());
}

#[test]
fn sweep_normalizes_to_unit_degree() {
    let rows = degree_sweep(&small(50), &[0.0, 1.0]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].degree, 0.0);
    assert!(rows[0].final_return.is_finite());
    assert_eq!(rows[1].normalized, 1.0);
    assert!(matches!(degree_sweep(&small(50), &[]), Err(HarnessError::Config(_))));
    assert!(degree_sweep(&small(50), &[-1.0]).is_err());
}

#[test]
fn exported_graphs_match_the_model() {
    let tr = Trainer::new(small(0)).unwrap();
    let text = tr.checkpoint();
    let state = [0.1, -0.2, 0.0, 0.3, 0.5, -0.5];
    let (core, general) = export_graph(&text, &state).unwrap();
    let (c2, g2) = tr.model().unwrap().adjacencies(&state).unwrap();
    assert_eq!(core, c2);
    assert_eq!(general, g2);
    let n = tr.config().corep.nodes;
    assert_eq!(core.shape(), &[n, n]);

    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, &core).unwrap();
    let csv = String::from_utf8(buf).unwrap();
    assert_eq!(csv.lines().count(), n);
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), n);
        for (j, v) in cells.iter().enumerate() {
            assert!((v - core.at(&[i, j])).abs() <= 1e-8 * core.at(&[i, j]).abs().max(1e-300));
        }
    }

    assert!(matches!(export_graph(&text, &[0.0; 3]), Err(HarnessError::Invalid(_))));
    let mut cfg = small(0);
    cfg.variant = Variant::PpoOnly;
    assert!(export_graph(&Trainer::new(cfg).unwrap().checkpoint(), &state).is_err());
}

#[test]
fn graph_verify_and_selfcheck_pass() {
    let r = graph_verify(60, 3).unwrap();
    assert!(r.passed(), "{:?}", r.failures);
    let s = selfcheck(3, 3).unwrap();
    assert!(s.passed(), "{:?}", s.results);
}

fn corep(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_corep")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn command_line_exit_codes() {
    assert_eq!(corep(&["train", "--set", "bogus=1"]).0, 2);
    assert_eq!(corep(&["train", "--set", "ppo.clip=-1"]).0, 2);
    let (code, out) = corep(&["train", "--set", "total_steps=0"]);
    assert_eq!((code, out.trim()), (0, METRICS_HEADER));
    // A perturbation this large overflows the state.
    let (code, _) = corep(&["train", "--set", "env.degree=1e308", "--set", "total_steps=100", "--set", "policy.hidden=4"]);
    assert_eq!(code, 3);
    assert_eq!(corep(&["graph-verify", "--trials", "10"]).0, 0);
}

#[test]
fn command_line_export_writes_both_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.txt");
    std::fs::write(&ck, Trainer::new(small(0)).unwrap().checkpoint()).unwrap();
    let (code, _) = corep(&[
        "graph-export",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--state",
        "0.1,-0.2,0,0.3,0.5,-0.5",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    for f in ["a_core.csv", "a_general.csv"] {
        assert_eq!(std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count(), 4);
    }
}
