use std::ffi::{CStr, CString};
use std::ptr;

use chainopt_ffi::*;

const TOY: &str = "input dim=3\nbatch 2\nlayer fc outputs=3 | softplus\nlayer fc outputs=2 | sigmoid\nradius 1\n";

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        chainopt_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn parse(text: &str) -> (i32, *mut ChainoptArch) {
    let c = CString::new(text).unwrap();
    let mut out = ptr::null_mut();
    let code = unsafe { chainopt_arch_parse(c.as_ptr(), &mut out) };
    (code, out)
}

#[test]
fn parse_query_free() {
    let (code, a) = parse(TOY);
    assert_eq!(code, CHAINOPT_OK);
    let mut n = 0usize;
    assert_eq!(unsafe { chainopt_arch_num_layers(a, &mut n) }, CHAINOPT_OK);
    assert_eq!(n, 2);
    let (mut m, mut l, mut big_l) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { chainopt_smoothness(a, 0, &mut m, &mut l, &mut big_l) }, CHAINOPT_OK);
    assert!(m.is_finite() && l.is_finite() && big_l.is_finite());
    let (mut m1, mut l1, mut b1) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { chainopt_smoothness(a, 2, &mut m1, &mut l1, &mut b1) }, CHAINOPT_OK);
    assert_eq!((m, l, big_l), (m1, l1, b1));
    assert_eq!(unsafe { chainopt_smoothness(a, 3, &mut m1, &mut l1, &mut b1) }, CHAINOPT_ERR_RANGE);
    unsafe { chainopt_arch_free(a) };
}

#[test]
fn parse_error_sets_message() {
    let (code, a) = parse("input dim=2\nlayer fc outputs=2 colour=red\n");
    assert_eq!(code, CHAINOPT_ERR_PARSE);
    assert!(a.is_null());
    assert!(last_error().contains("line 2"), "{}", last_error());
}

#[test]
fn null_arguments_are_rejected() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { chainopt_arch_parse(ptr::null(), &mut out) }, CHAINOPT_ERR_NULL);
    let mut n = 0usize;
    assert_eq!(unsafe { chainopt_arch_num_layers(ptr::null_mut(), &mut n) }, CHAINOPT_ERR_NULL);
    unsafe { chainopt_arch_free(ptr::null_mut()) };
}

#[test]
fn success_clears_last_error() {
    let _ = parse("");
    assert!(!last_error().is_empty());
    let (code, a) = parse(TOY);
    assert_eq!(code, CHAINOPT_OK);
    assert_eq!(unsafe { chainopt_last_error_message(ptr::null_mut(), 0) }, 0);
    unsafe { chainopt_arch_free(a) };
}

#[test]
fn smaller_radius_gives_smaller_lipschitz_bound() {
    let (_, a) = parse(TOY);
    let (mut m, mut l_wide, mut big) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(chainopt_arch_set_domain(a, 2.0, 1.0), CHAINOPT_OK);
        chainopt_smoothness(a, 0, &mut m, &mut l_wide, &mut big);
        assert_eq!(chainopt_arch_set_domain(a, 0.5, 1.0), CHAINOPT_OK);
        let mut l_narrow = 0.0;
        chainopt_smoothness(a, 0, &mut m, &mut l_narrow, &mut big);
        assert!(l_narrow < l_wide);
        assert_eq!(chainopt_arch_set_domain(a, -1.0, 1.0), CHAINOPT_ERR_INVALID);
        chainopt_arch_free(a);
    }
}

#[test]
fn gradcheck_and_oracles() {
    let (_, a) = parse(TOY);
    let mut err = 1.0;
    assert_eq!(unsafe { chainopt_gradcheck(a, 2, 7, &mut err) }, CHAINOPT_OK);
    assert!(err <= 1e-5, "{err}");
    unsafe { chainopt_arch_free(a) };
    let (mut dp, mut dual) = (1.0, 1.0);
    assert_eq!(unsafe { chainopt_oracle_agreement(3, 3, 2, 1.0, 5, &mut dp, &mut dual) }, CHAINOPT_OK);
    assert!(dp <= 1e-8 && dual <= 1e-6, "{dp} {dual}");
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/chainopt.h")).unwrap();
    for name in [
        "chainopt_arch_parse",
        "chainopt_arch_load",
        "chainopt_arch_free",
        "chainopt_arch_num_layers",
        "chainopt_arch_set_batch",
        "chainopt_arch_set_batchnorm_eps",
        "chainopt_arch_set_domain",
        "chainopt_smoothness",
        "chainopt_gradcheck",
        "chainopt_oracle_agreement",
        "chainopt_last_error_message",
        "chainopt_version",
        "typedef struct ChainoptArch ChainoptArch",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(chainopt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
