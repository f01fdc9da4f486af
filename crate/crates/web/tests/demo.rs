use dcbf_web::{compare_slices_json, feasibility_slice_json, rollout_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn slice_has_one_status_per_point() {
    let s = parse(&feasibility_slice_json("mpc_cbf", 0.2, "halfspace", 0.0, 5).unwrap());
    assert_eq!(s["status"].as_array().unwrap().len(), 25);
    assert_eq!(s["x"][0], -2.0);
    assert_eq!(s["v"][4], 2.0);
    // At rest on the far side of the boundary the state is feasible.
    assert_eq!(s["status"][0], "feasible");
    assert!(s["feasible"].as_u64().unwrap() > 0);
}

#[test]
fn relaxed_slice_contains_fixed_rate_slice() {
    let o = parse(&compare_slices_json("mpc_cbf", 0.1, "cbf_nmpc", 0.1, "halfspace", 0.5, 5).unwrap());
    assert_eq!(o["first_only"], 0);
    assert!(o["second"].as_u64().unwrap() >= o["first"].as_u64().unwrap());
}

#[test]
fn relaxed_closed_loop_stays_safe() {
    let r = parse(&rollout_json("cbf_nmpc", 0.1, "halfspace", -2.0, 0.0, 1.0, 30).unwrap());
    assert_eq!(r["completed"], true);
    let h = r["h"].as_array().unwrap();
    assert_eq!(h.len(), 31);
    assert!(h.iter().all(|v| v.as_f64().unwrap() >= -1e-8));
}

#[test]
fn bad_arguments_are_rejected() {
    assert!(feasibility_slice_json("mpc", 0.1, "halfspace", 0.0, 5).is_err());
    assert!(feasibility_slice_json("mpc_cbf", 0.1, "box", 0.0, 5).is_err());
    assert!(feasibility_slice_json("mpc_cbf", 1.5, "halfspace", 0.0, 5).is_err());
    assert!(feasibility_slice_json("mpc_cbf", 0.1, "halfspace", 0.0, 1).is_err());
    assert!(rollout_json("cbf_nmpc", 0.1, "halfspace", -2.0, 0.0, 1.0, 0).is_err());
}
