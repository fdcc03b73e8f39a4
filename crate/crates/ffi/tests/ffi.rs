use std::ffi::{CStr, CString};
use std::ptr;

use ceat_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ceat_last_error()) }.to_string_lossy().into_owned()
}

fn new_mlp(seed: u64) -> *mut CeatEnsemble {
    let mut e = ptr::null_mut();
    let shape = [2usize];
    let st = unsafe { ceat_ensemble_new(CeatArch::Mlp, 3, shape.as_ptr(), 1, 2, seed, &mut e) };
    assert_eq!(st, CeatStatus::Ok, "{}", last_error());
    e
}

fn grid(n: usize) -> Vec<f64> {
    (0..n * 2).map(|i| (i as f64 * 0.137).fract()).collect()
}

#[test]
fn info_probs_and_predict() {
    let e = new_mlp(1);
    let (mut m, mut k, mut d) = (0, 0, 0);
    assert_eq!(unsafe { ceat_ensemble_info(e, &mut m, &mut k, &mut d) }, CeatStatus::Ok);
    assert_eq!((m, k, d), (3, 2, 2));
    let x = grid(5);
    let mut probs = vec![0.0; 10];
    assert_eq!(unsafe { ceat_ensemble_probs(e, x.as_ptr(), 5, probs.as_mut_ptr()) }, CeatStatus::Ok);
    for row in probs.chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
    let mut labels = vec![9usize; 5];
    assert_eq!(unsafe { ceat_ensemble_predict(e, x.as_ptr(), 5, labels.as_mut_ptr()) }, CeatStatus::Ok);
    for (l, row) in labels.iter().zip(probs.chunks(2)) {
        assert_eq!(*l, usize::from(row[1] > row[0]));
    }
    unsafe { ceat_ensemble_free(e) };
}

#[test]
fn attack_stays_in_ball() {
    let e = new_mlp(2);
    let x = grid(8);
    let y = [0usize, 1, 0, 1, 0, 1, 0, 1];
    let mut adv = vec![0.0; x.len()];
    for kind in [CeatAttack::Fgsm, CeatAttack::Pgd, CeatAttack::Mim, CeatAttack::Cw] {
        let st = unsafe { ceat_ensemble_attack(e, kind, 0.05, 0.01, 10, 3, x.as_ptr(), y.as_ptr(), 8, adv.as_mut_ptr()) };
        assert_eq!(st, CeatStatus::Ok, "{}", last_error());
        for (a, c) in adv.iter().zip(&x) {
            assert!((a - c).abs() <= 0.05 + 1e-12 && (0.0..=1.0).contains(a));
        }
    }
    unsafe { ceat_ensemble_free(e) };
}

#[test]
fn save_load_round_trip() {
    let e = new_mlp(3);
    let x = grid(4);
    let y = [0usize, 1, 1, 0];
    assert_eq!(
        unsafe { ceat_ensemble_train_epoch(e, x.as_ptr(), y.as_ptr(), 4, 1.0, 5.0, 2, 0, 0) },
        CeatStatus::Ok,
        "{}",
        last_error()
    );
    let dir = tempfile::tempdir().unwrap();
    let cdir = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ceat_ensemble_save(e, cdir.as_ptr()) }, CeatStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ceat_ensemble_load(cdir.as_ptr(), 3, &mut loaded) }, CeatStatus::Ok);
    let (mut p1, mut p2) = (vec![0.0; 8], vec![0.0; 8]);
    unsafe {
        ceat_ensemble_probs(e, x.as_ptr(), 4, p1.as_mut_ptr());
        ceat_ensemble_probs(loaded, x.as_ptr(), 4, p2.as_mut_ptr());
    }
    assert_eq!(p1, p2);
    unsafe {
        ceat_ensemble_free(e);
        ceat_ensemble_free(loaded);
    }
}

#[test]
fn errors_are_reported() {
    let mut e = ptr::null_mut();
    let shape = [2usize];
    let st = unsafe { ceat_ensemble_new(CeatArch::Mlp, 1, shape.as_ptr(), 1, 2, 0, &mut e) };
    assert_eq!(st, CeatStatus::Config);
    assert!(last_error().contains("at least 2"));
    assert!(e.is_null());

    let mut out = [0.0];
    assert_eq!(unsafe { ceat_ensemble_probs(ptr::null(), ptr::null(), 1, out.as_mut_ptr()) }, CeatStatus::NullPointer);

    let missing = CString::new("/nonexistent/ceat").unwrap();
    let st = unsafe { ceat_ensemble_load(missing.as_ptr(), 3, &mut e) };
    assert_eq!(st, CeatStatus::Io);
    assert!(last_error().contains("member_0.ckpt"));

    let (b, c) = ([0.9, 0.5], [0.2, 1.5]);
    let mut w = [0.0; 2];
    assert_eq!(unsafe { ceat_disparity_weight(b.as_ptr(), c.as_ptr(), 2, 1.0, w.as_mut_ptr()) }, CeatStatus::InvalidArgument);
    let c = [0.2, 0.5];
    assert_eq!(unsafe { ceat_disparity_weight(b.as_ptr(), c.as_ptr(), 2, 1.0, w.as_mut_ptr()) }, CeatStatus::Ok);
    assert!((w[0] - 0.7f64.exp()).abs() < 1e-12);
    assert_eq!(w[1], 1.0);
    assert_eq!(last_error(), "");

    unsafe { ceat_ensemble_free(ptr::null_mut()) };
    let v = unsafe { CStr::from_ptr(ceat_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_entry_points() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ceat.h")).unwrap();
    for name in [
        "ceat_ensemble_new",
        "ceat_ensemble_load",
        "ceat_ensemble_save",
        "ceat_ensemble_free",
        "ceat_ensemble_probs",
        "ceat_ensemble_predict",
        "ceat_ensemble_attack",
        "ceat_ensemble_train_epoch",
        "ceat_disparity_weight",
        "ceat_last_error",
        "ceat_version",
        "typedef struct CeatEnsemble CeatEnsemble",
        "CEAT_STATUS_OK",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        return;
    };
    if !cc.status.success() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ceat.h\"\n\
         int main(void) {\n\
             CeatEnsemble *e = 0;\n\
             size_t shape[1] = {2};\n\
             enum CeatStatus s = ceat_ensemble_new(CEAT_ARCH_MLP, 3, shape, 1, 3, 7, &e);\n\
             ceat_ensemble_free(e);\n\
             return s == CEAT_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
