use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use gcnface_ffi::*;

const CONFIG: &str = r#"
seed = 9

[model]
vertices = 42

[gcn]
embedding_dim = 4
decoder_channels = [3, 2]
refiner_width = 2
refiner_blocks = 1
cheb_order = 3
discriminator_channels = [2, 2, 2, 2, 2, 2]

[loss]
hold_steps = 1
warmup_steps = 1

[train]
batch_size = 2
critic_steps = 1

[data]
count = 2
detail_first_mode = 4
detail_modes = 8
"#;

fn last_error() -> String {
    let p = gcnface_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn session() -> *mut GcnfaceSession {
    let cfg = CString::new(CONFIG).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { gcnface_session_new(cfg.as_ptr(), ptr::null(), &mut s) }, GcnfaceStatus::Ok);
    s
}

fn trainer(s: *const GcnfaceSession, ckpt: Option<&CString>) -> *mut GcnfaceTrainer {
    let mut t = ptr::null_mut();
    let p = ckpt.map_or(ptr::null(), |c| c.as_ptr());
    let st = unsafe { gcnface_trainer_new(s, p, &mut t) };
    assert_eq!(st, GcnfaceStatus::Ok, "{}", last_error());
    t
}

fn step(t: *mut GcnfaceTrainer) -> GcnfaceStepLog {
    let mut log = GcnfaceStepLog::default();
    let st = unsafe { gcnface_trainer_step(t, ptr::null(), &mut log) };
    assert_eq!(st, GcnfaceStatus::Ok, "{}", last_error());
    log
}

fn text(mut f: impl FnMut(*mut c_char, usize, *mut usize) -> GcnfaceStatus) -> String {
    let mut needed = 0;
    assert_eq!(f(ptr::null_mut(), 0, &mut needed), GcnfaceStatus::BufferTooSmall);
    let mut buf = vec![0u8; needed];
    assert_eq!(f(buf.as_mut_ptr().cast(), buf.len(), &mut needed), GcnfaceStatus::Ok);
    CStr::from_bytes_with_nul(&buf).unwrap().to_str().unwrap().to_string()
}

#[test]
fn errors_map_to_codes_and_messages() {
    let bad = CString::new("[train]\nbatch_size = 0\n").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { gcnface_session_new(bad.as_ptr(), ptr::null(), &mut s) }, GcnfaceStatus::Config);
    assert!(s.is_null());
    assert!(last_error().starts_with("config: "));

    let junk = CString::new("= nope").unwrap();
    assert_eq!(unsafe { gcnface_session_new(junk.as_ptr(), ptr::null(), &mut s) }, GcnfaceStatus::Config);

    let mut n = 0;
    assert_eq!(unsafe { gcnface_session_sample_count(ptr::null(), &mut n) }, GcnfaceStatus::InvalidArgument);

    let s = session();
    assert!(gcnface_last_error().is_null());
    let missing = CString::new("/nonexistent/c.ckpt").unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { gcnface_trainer_new(s, missing.as_ptr(), &mut t) }, GcnfaceStatus::Io);
    unsafe { gcnface_session_free(s) };
}

#[test]
fn train_save_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let s = session();
    let mut count = 0;
    let mut size = 0;
    unsafe {
        assert_eq!(gcnface_session_sample_count(s, &mut count), GcnfaceStatus::Ok);
        assert_eq!(gcnface_session_image_size(s, &mut size), GcnfaceStatus::Ok);
    }
    assert_eq!((count, size), (2, 64));
    let cfg = text(|b, l, n| unsafe { gcnface_session_config(s, b, l, n) });
    assert!(cfg.contains("vertices = 42"));

    let t = trainer(s, None);
    let first = step(t);
    assert_eq!(first.sigma, [0.0, 0.2, 0.001, 1.0]);
    assert!(first.pixel.is_nan() && first.critic_loss.is_nan());
    step(t);

    let ckpt = CString::new(dir.path().join("c.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gcnface_trainer_save(t, ckpt.as_ptr()) }, GcnfaceStatus::Ok);
    let r = trainer(s, Some(&ckpt));
    unsafe { gcnface_session_free(s) };
    let mut at = 0;
    assert_eq!(unsafe { gcnface_trainer_current_step(r, &mut at) }, GcnfaceStatus::Ok);
    assert_eq!(at, 2);

    let (a, b) = (step(t), step(r));
    assert_eq!(a.sigma, [1.0, 0.2, 0.001, 0.0]);
    assert!(!a.critic_loss.is_nan());
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    assert_eq!(a.critic_loss.to_bits(), b.critic_loss.to_bits());

    let mut needed = 0;
    let mut albedo = vec![0.0; 42 * 3];
    unsafe {
        let st = gcnface_trainer_refined_albedo(t, 1, albedo.as_mut_ptr(), albedo.len(), &mut needed);
        assert_eq!(st, GcnfaceStatus::Ok);
        assert_eq!(needed, 126);
        let st = gcnface_trainer_refined_albedo(t, 5, albedo.as_mut_ptr(), albedo.len(), &mut needed);
        assert_eq!(st, GcnfaceStatus::InvalidArgument);
    }
    assert!(albedo.iter().all(|v| (0.0..=1.0).contains(v)));

    let eval = text(|b, l, n| unsafe { gcnface_trainer_eval(r, b, l, n) });
    assert!(eval.starts_with("# gcnface eval v1"));

    let out = CString::new(dir.path().join("inf").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gcnface_trainer_infer(t, 0, out.as_ptr()) }, GcnfaceStatus::Ok);
    assert!(dir.path().join("inf/refined.obj").exists());

    let data = CString::new(dir.path().join("d.bin").to_str().unwrap()).unwrap();
    unsafe {
        gcnface_trainer_free(t);
        gcnface_trainer_free(r);
        let s = session();
        assert_eq!(gcnface_session_save_dataset(s, data.as_ptr()), GcnfaceStatus::Ok);
        gcnface_session_free(s);
        let cfg = CString::new(CONFIG).unwrap();
        let mut s2 = ptr::null_mut();
        assert_eq!(gcnface_session_new(cfg.as_ptr(), data.as_ptr(), &mut s2), GcnfaceStatus::Ok);
        gcnface_session_free(s2);
        gcnface_session_free(ptr::null_mut());
        gcnface_trainer_free(ptr::null_mut());
    }
}

#[test]
fn gradcheck_through_the_abi() {
    let mut passed = -1;
    let report = text(|b, l, n| unsafe { gcnface_gradcheck(1, &mut passed, b, l, n) });
    assert_eq!(passed, 1);
    assert!(report.lines().all(|l| l.contains("status=pass")));
}

#[test]
fn header_compiles_and_links_from_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/gcnface.h");
    assert!(std::fs::read_to_string(&header).unwrap().contains("gcnface_trainer_step"));
    let lib_dir = root.join("../../target").join(if cfg!(debug_assertions) { "debug" } else { "release" });
    let lib = lib_dir.join("libgcnface_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping C link: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("comparison refined_psnr_wins="));
}
