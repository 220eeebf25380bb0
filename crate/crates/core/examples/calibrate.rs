// Window calibration for the reconstruction pipeline: runs Config A at a
// small bound with explicit windows and compares against the WDVV oracle.
use blowup_core::coeff::CycloField;
use blowup_core::cohring::{build_geometry, Center, GeometrySpec};
use blowup_core::gwdata::*;
use blowup_core::reconstruct as rec;
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bound: i64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let z_min: i32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(-12);
    let z_max: i32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let q_min: i64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(-20);
    let q_max: i64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(14);
    let deform: u32 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1);

    let field = CycloField::for_codimension(2);
    let geom = build_geometry(
        &GeometrySpec::ProjectiveSpace {
            n: 2,
            center: Center::Point,
        },
        &field,
    )
    .unwrap();
    let budget = rec::budget_for(&geom, bound, 1);
    let mut p = (*rec::pipeline_policy(&geom, &budget)).clone();
    p.z_min = z_min;
    p.z_max = z_max;
    p.q_min = q_min;
    p.q_max = q_max;
    p.deform_order = deform;
    let policy = Arc::new(p);
    eprintln!(
        "windows: z [{z_min},{z_max}], q [{q_min},{q_max}], deform {deform}, Q_max {}",
        policy.nov_bound
    );

    let t0 = Instant::now();
    let space_x = gw_space_x(&geom);
    let gw_x = wdvv_close(&space_x, &preset_seeds_x(&geom), 3 * bound + 12).unwrap();
    let space_z = gw_space_z(&geom);
    let gw_z = wdvv_close(&space_z, &preset_seeds_z(&geom), 12).unwrap();
    eprintln!("[{:?}] input data ready", t0.elapsed());

    let initial = rec::initial_data(&geom, &policy).unwrap();
    eprintln!(
        "[{:?}] initial data: psi0 {} terms",
        t0.elapsed(),
        initial.psi0.terms.len()
    );
    let blocks = rec::assemble_block_solution(&geom, &gw_x, &gw_z, &initial, &policy).unwrap();
    eprintln!(
        "[{:?}] blocks: M {} terms",
        t0.elapsed(),
        blocks.m_block.terms.len()
    );
    let birkhoff = rec::birkhoff_factorize(&geom, &initial, &blocks.m_block, &policy).unwrap();
    eprintln!(
        "[{:?}] birkhoff: P {} terms, M' {} terms",
        t0.elapsed(),
        birkhoff.p.terms.len(),
        birkhoff.m_prime.terms.len()
    );
    let mirror = rec::recover_mirror_map(&geom, &blocks, &birkhoff, &initial, &policy).unwrap();
    eprintln!(
        "[{:?}] mirror map: {} terms",
        t0.elapsed(),
        mirror.tau_tilde.terms.len()
    );
    let extract = rec::extract_gw(&geom, &initial, &mirror, bound, &policy).unwrap();
    eprintln!(
        "[{:?}] extracted {} invariants",
        t0.elapsed(),
        extract.dataset.inv.len()
    );

    // oracle comparison
    let space_xt = gw_space_xt(&geom);
    let oracle = wdvv_close(&space_xt, &preset_seeds_xt(&geom), bound).unwrap();
    let mut mismatches = 0;
    for (k, v) in &oracle.inv {
        if space_xt.c1_dot(&k.0) > bound {
            continue;
        }
        match extract.dataset.inv.get(k) {
            Some(w) if w == v => {}
            other => {
                println!(
                    "MISMATCH d={:?} ins={:?}: oracle {} vs {:?}",
                    k.0,
                    k.1,
                    v,
                    other.map(|x| x.to_string())
                );
                mismatches += 1;
            }
        }
    }
    for (k, _) in &extract.dataset.inv {
        if !oracle.inv.contains_key(k) {
            println!("EXTRA KEY d={:?} ins={:?}", k.0, k.1);
            mismatches += 1;
        }
    }
    println!(
        "[{:?}] bound {bound}: {} oracle records, {mismatches} mismatches",
        t0.elapsed(),
        oracle.inv.len()
    );
    if mismatches > 0 {
        let res = extract.dataset.wdvv_residual(true).unwrap();
        println!("extracted dataset WDVV residual: {res}");
    }
}
