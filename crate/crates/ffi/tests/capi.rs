use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use avedit::model::{save_checkpoint, Model, ModelConfig};
use avedit_ffi::*;

fn last_error() -> String {
    let p = avedit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &std::path::Path) -> CString {
    let cfg = ModelConfig {
        blocks: 1,
        dim: 16,
        heads: 2,
        ..ModelConfig::default()
    };
    let path = dir.join("tiny.ckpt");
    save_checkpoint(&path, &Model::init(cfg, 1).unwrap(), 1, 0).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn edit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(avedit_model_load(ckpt.as_ptr(), &mut model), AveditStatus::Ok);
        let mut n = 0u64;
        assert_eq!(avedit_model_num_parameters(model, &mut n), AveditStatus::Ok);
        assert!(n > 0);

        let mut scene = ptr::null_mut();
        assert_eq!(avedit_scene_generate(3, &mut scene), AveditStatus::Ok);
        let mut band = 99u32;
        assert_eq!(avedit_scene_band(scene, &mut band), AveditStatus::Ok);
        assert!(band < 8);

        let mut g = avedit_guidance_default();
        assert_eq!((g.steps, g.tau), (50, 10));
        g.steps = 4;
        g.tau = 1;
        let mut edit = ptr::null_mut();
        assert_eq!(avedit_edit(model, scene, -1, &g, 5, &mut edit), AveditStatus::Ok);
        let mut total = 0u64;
        assert_eq!(avedit_edit_total_forwards(edit, &mut total), AveditStatus::Ok);
        assert_eq!(total, 2 + 3 * 3);

        let (mut ctx, mut lag, mut dom) = (AveditCtxF1::default(), 0i64, 0u8);
        assert_eq!(avedit_edit_scores(edit, &mut ctx, &mut lag, &mut dom), AveditStatus::Ok);
        assert!((0.0..=1.0).contains(&ctx.f1));

        let mut len = 0usize;
        assert_eq!(avedit_edit_envelope(edit, ptr::null_mut(), &mut len), AveditStatus::Ok);
        assert_eq!(len, 32);
        let mut short = vec![0.0; 4];
        let mut cap = short.len();
        assert_eq!(
            avedit_edit_envelope(edit, short.as_mut_ptr(), &mut cap),
            AveditStatus::InvalidArgument
        );
        assert_eq!(cap, 32);
        let mut buf = vec![-1.0; 32];
        assert_eq!(avedit_edit_envelope(edit, buf.as_mut_ptr(), &mut len), AveditStatus::Ok);
        assert!(buf.iter().all(|&e| e >= 0.0));

        avedit_edit_free(edit);
        avedit_scene_free(scene);
        avedit_model_free(model);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut model = ptr::null_mut();
        let missing = CString::new("/definitely/not/here.ckpt").unwrap();
        assert_eq!(avedit_model_load(missing.as_ptr(), &mut model), AveditStatus::Io);
        assert!(last_error().contains("not/here.ckpt"));
        assert!(model.is_null());

        assert_eq!(avedit_model_load(ptr::null(), &mut model), AveditStatus::NullPointer);
        assert!(last_error().contains("path"));

        let mut n = 0u64;
        assert_eq!(avedit_model_num_parameters(ptr::null(), &mut n), AveditStatus::NullPointer);

        // Success clears the previous message.
        let mut scene = ptr::null_mut();
        assert_eq!(avedit_scene_generate(1, &mut scene), AveditStatus::Ok);
        assert!(avedit_last_error().is_null());

        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_checkpoint(dir.path());
        assert_eq!(avedit_model_load(ckpt.as_ptr(), &mut model), AveditStatus::Ok);
        let mut g = avedit_guidance_default();
        g.tau = 60;
        let mut edit = ptr::null_mut();
        assert_eq!(avedit_edit(model, scene, 0, &g, 0, &mut edit), AveditStatus::InvalidArgument);
        assert!(last_error().contains("guidance"));
        g.tau = 10;
        assert_eq!(avedit_edit(model, scene, 8, &g, 0, &mut edit), AveditStatus::InvalidArgument);

        avedit_scene_free(scene);
        avedit_model_free(model);
        avedit_scene_free(ptr::null_mut());
    }
}

#[test]
fn ctx_f1_worked_example() {
    let gen = [0.0, 1.0];
    let prot = [0.5, 1.0];
    let mut out = AveditCtxF1::default();
    let st = unsafe { avedit_ctx_f1(gen.as_ptr(), 1, prot.as_ptr(), 1, gen.as_ptr(), 1, &mut out) };
    assert_eq!(st, AveditStatus::Ok);
    assert!((out.precision - 0.5).abs() < 1e-15);
    assert!((out.recall - 1.0).abs() < 1e-15);
    assert!((out.f1 - 2.0 / 3.0).abs() < 1e-15);

    let bad = [0.0, f64::NAN];
    let st = unsafe { avedit_ctx_f1(bad.as_ptr(), 1, ptr::null(), 0, ptr::null(), 0, &mut out) };
    assert_eq!(st, AveditStatus::InvalidArgument);
    let st = unsafe { avedit_ctx_f1(ptr::null(), 1, ptr::null(), 0, ptr::null(), 0, &mut out) };
    assert_eq!(st, AveditStatus::NullPointer);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(avedit_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{dir}/include/avedit.h")).unwrap();
    for name in [
        "avedit_last_error",
        "avedit_model_load",
        "avedit_model_free",
        "avedit_scene_generate",
        "avedit_edit",
        "avedit_edit_envelope",
        "avedit_ctx_f1",
        "typedef struct AveditModel AveditModel",
        "AVEDIT_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"avedit.h\"\n\
         int main(void) {\n\
           AveditModel *m = 0;\n\
           AveditStatus s = avedit_model_load(\"x\", &m);\n\
           AveditGuidance g = avedit_guidance_default();\n\
           (void)g;\n\
           return s == AVEDIT_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(format!("{dir}/include"))
        .arg(&src)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
}
