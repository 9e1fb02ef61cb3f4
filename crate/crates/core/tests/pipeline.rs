use paired_sr::harness::{
    align_with, parse_reports_csv, run_self_training, synthesize_pair, synthetic_specimen, write_run,
    DegradationSpec, ExperimentConfig, Manifest, Sample,
};
use paired_sr::image::{bicubic_upsample, gaussian_blur};
use paired_sr::io::{load_image, save_image};
use paired_sr::lbnlm::{super_resolve, NlmConfig};
use paired_sr::library::{build_library, LibraryConfig, PairPool, PairedLibrary};
use paired_sr::registration::{match_locations, GlobalTransform, MatchConfig};
use paired_sr::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn local_displacements_follow_the_warp_field() {
    // Rich 2-D texture; along a lone edge the displacement is ambiguous.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let noise = GrayImage::from_fn(256, 256, |_, _| rng.random_range(0.0..255.0));
    let truth = gaussian_blur(&noise, 1.5).map(|v| 128.0 + 4.0 * (v - 128.0));
    let spec = DegradationSpec {
        local_warp_amplitude: 3.0,
        local_warp_scale: 64.0,
        seed: 12,
        ..DegradationSpec::default()
    };
    let (pair, gt) = synthesize_pair(&truth, &spec).unwrap();
    let aligned = align_with(&pair, &GlobalTransform::identity()).unwrap();
    assert_eq!(aligned.hr.dims(), (256, 256));
    let reg = bicubic_upsample(&aligned.lr, 2).unwrap();
    let matches = match_locations(&aligned.hr, &reg, &MatchConfig::default()).unwrap();
    let textured: Vec<_> = matches.iter().filter(|m| m.textured).collect();
    assert!(textured.len() > 1000);
    let good = textured
        .iter()
        .filter(|m| {
            let (wx, wy) = gt.warp.displacement(m.center.0 as f64, m.center.1 as f64);
            (m.displacement.0 as f64 - wy).abs() <= 1.0 && (m.displacement.1 as f64 - wx).abs() <= 1.0
        })
        .count();
    let rate = good as f64 / textured.len() as f64;
    assert!(rate >= 0.9, "only {:.1}% of textured patches within 1 px", 100.0 * rate);
}

#[test]
fn stored_library_reproduces_reconstruction() {
    let truth = synthetic_specimen(128, 128, 3);
    let spec = DegradationSpec {
        blur_sigma: 1.0,
        noise_sigma_lr: 5.0,
        seed: 3,
        ..DegradationSpec::default()
    };
    let (pair, _) = synthesize_pair(&truth, &spec).unwrap();
    let aligned = align_with(&pair, &GlobalTransform::identity()).unwrap();
    let matching = MatchConfig::default();
    let reg = bicubic_upsample(&aligned.lr, 2).unwrap();
    let matches = match_locations(&aligned.hr, &reg, &matching).unwrap();
    let mut pool = PairPool::new(matching.n).unwrap();
    pool.add_region(aligned.hr.clone(), reg, matches);
    let cfg = LibraryConfig {
        size: 300,
        categories: 6,
        ..LibraryConfig::default()
    };
    let lib = build_library(&pool, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lib.bin");
    lib.save(&path).unwrap();
    let loaded = PairedLibrary::load(&path).unwrap();
    assert_eq!(loaded, lib);

    let lr_path = dir.path().join("lr.png");
    save_image(&aligned.lr, &lr_path).unwrap();
    let lr = load_image(&lr_path).unwrap();
    let nlm = NlmConfig::default();
    let a = super_resolve(&lr, &lib, &nlm).unwrap();
    let b = super_resolve(&lr, &loaded, &nlm).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dims(), aligned.hr.dims());
}

#[test]
fn run_records_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::from("output_dir = \"out\"\n\n[library]\nsize = 400\ncategories = 8\n");
    for i in 0..2u64 {
        let truth = synthetic_specimen(160, 160, 40 + i);
        let spec = DegradationSpec {
            blur_sigma: 1.0,
            noise_sigma_lr: 4.0,
            global_shift: (2.0, -1.0),
            seed: i,
            ..DegradationSpec::default()
        };
        let (pair, _) = synthesize_pair(&truth, &spec).unwrap();
        save_image(&pair.hr, dir.path().join(format!("p{i}_hr.png"))).unwrap();
        save_image(&pair.lr, dir.path().join(format!("p{i}_lr.png"))).unwrap();
        manifest.push_str(&format!("\n[[pairs]]\nid = \"p{i}\"\nhr = \"p{i}_hr.png\"\nlr = \"p{i}_lr.png\"\n"));
    }
    let path = dir.path().join("run.toml");
    std::fs::write(&path, manifest).unwrap();

    let m = Manifest::load(&path).unwrap();
    m.check_inputs().unwrap();
    let cfg: ExperimentConfig = m.experiment().unwrap();
    let out = run_self_training(&m.load_pairs().unwrap(), &cfg).unwrap();
    assert!(out.skipped.is_empty());
    let summary = write_run(&out, &m.output_dir).unwrap();

    let reports = parse_reports_csv(&std::fs::read_to_string(m.output_dir.join("reports.csv")).unwrap()).unwrap();
    assert_eq!(reports, out.reports);
    assert_eq!(reports.len(), 2 * 12);
    assert_eq!(summary.row(Sample::OutOfSample).unwrap().count, 6);
    assert_eq!(summary.row(Sample::InSample).unwrap().count, 18);
    assert_eq!(std::fs::read_to_string(m.output_dir.join("summary.csv")).unwrap(), summary.to_csv());

    for id in ["p0", "p1"] {
        let t = GlobalTransform::load(m.output_dir.join(id).join("registration.toml")).unwrap();
        assert_eq!((t.shift_x, t.shift_y, t.theta), (2.0, -1.0, 0.0));
        let dump = std::fs::read_to_string(m.output_dir.join(id).join("displacements.csv")).unwrap();
        assert!(dump.lines().count() > 1);
    }
    for rec in &out.reconstructions {
        let file = m.output_dir.join(&rec.pair_id).join(format!("sr_{:02}.png", rec.subimage));
        assert_eq!(load_image(file).unwrap().dims(), rec.image.dims());
    }
}
