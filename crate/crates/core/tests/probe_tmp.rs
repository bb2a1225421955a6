use scalebits::export::top_left_mass_fraction;
use scalebits::layout::{apply_permutations, compute_permutations, partition_weights, permute_matrix_like};
use scalebits::model::{build_model, coupling_graph, eval_loss, make_calibration, make_corpus, pretrain, ModelSpec, PretrainConfig};
use scalebits::quant::{quantize_model, QuantConfig};
use scalebits::rng::Rng;
use scalebits::search::oracle::lattice_probe;
use scalebits::sensitivity::{element_sensitivity, quantize_uniform};

#[test]
fn diagnose() {
    let spec = ModelSpec::default();
    let model0 = build_model(&spec).unwrap();
    let corpus = make_corpus(spec.vocab, 40_000, 11).unwrap();
    let cal = make_calibration(&corpus, 128, 64, 5).unwrap();
    let pcfg = PretrainConfig { steps: 400, lr: 2.0, batch_size: 4, seq_len: 64, seed: 3 };
    let (trained, _) = pretrain(&model0, &corpus, &pcfg).unwrap();
    let qcfg = QuantConfig { group_size: 32, ..QuantConfig::default() };
    let part = partition_weights(&trained, 32, 64, 32).unwrap();

    // clustering distribution
    let warm = quantize_uniform(&trained, &part, 2, &qcfg).unwrap();
    let mut rng = Rng::derive(23, 0x616363);
    let ids = cal.sample_ids(16, &mut rng);
    let batch = cal.batch(&ids);
    let snapshot = element_sensitivity(&trained, &warm, &batch).unwrap();
    let perms = compute_permutations(&trained, &snapshot).unwrap();
    let groups = coupling_graph(&trained);
    let mut worse = 0; let mut better = 0; let mut tot_before = 0.0; let mut tot_after = 0.0;
    let mut worst: (f64, String) = (0.0, String::new());
    for site in &trained.sites {
        let s = &snapshot[&site.name];
        let b = top_left_mass_fraction(s);
        let a = top_left_mass_fraction(&permute_matrix_like(s, &site.name, &groups, &perms));
        tot_before += b; tot_after += a;
        if a < b - 1e-12 { worse += 1; if b - a > worst.0 { worst = (b - a, site.name.clone()); } }
        if a > b + 1e-12 { better += 1; }
    }
    println!("clustering: {better} better, {worse} worse of {} sites; mean before {:.4} after {:.4}; worst drop {:.4} at {}",
        trained.sites.len(), tot_before / 56.0, tot_after / 56.0, worst.0, worst.1);

    // lattice fractions
    let _reordered = apply_permutations(&trained, &perms).unwrap();
    let layer_of_block: Vec<usize> = (0..part.n_blocks).map(|f| trained.sites[part.locate(f).site].layer).collect();
    let all = cal.all();
    let value = |layer_bits: &[u8]| -> f64 {
        let assignment: Vec<u8> = layer_of_block.iter().map(|&l| layer_bits[l]).collect();
        let qm = quantize_model(&trained, &part, &assignment, &qcfg).unwrap();
        -eval_loss(&spec, &qm, &all).unwrap()
    };
    for (lo, hi) in [(1u8, 3u8), (1, 4), (2, 4)] {
        let report = lattice_probe(&value, spec.n_layers, lo, hi, 5, 8, 79, 0.0).unwrap();
        println!("lattice[{lo}..{hi}]: mono {}/{} dr {}/{}", report.mono_violations, report.mono_checks, report.dr_violations, report.dr_checks);
        if lo == 1 && hi == 3 {
            for (ci, ch) in report.chains.iter().enumerate() {
                println!("  chain {ci} coord {} marg={:?}", ch.coord, ch.marginals.iter().map(|v| (v*1e5).round()/1e5).collect::<Vec<_>>());
            }
        }
    }
}
