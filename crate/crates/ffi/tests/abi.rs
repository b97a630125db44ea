use std::ffi::{CStr, CString};
use std::ptr;

use dynroute::data::{network_checkpoint, save_checkpoint};
use dynroute::evaluation::auc;
use dynroute::matrix::Matrix;
use dynroute::model::{build_network, NetworkConfig};
use dynroute::routing::{gram, route_conv1x1_kernel, Conv1x1CapsuleParams};
use dynroute::Tensor;
use dynroute_ffi::*;

fn small_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 32,
        stem_channels: 4,
        transition_channels: 8,
        n_dense_blocks: 1,
        layers_per_block: 1,
        growth_rate: 4,
        bottleneck_width: 2,
        head_channels: 8,
        head_kernel: 3,
        routing_iters: 2,
        caps_dim_class: 4,
        n_classes: 3,
        ..NetworkConfig::default()
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dr_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

struct Loaded {
    handle: *mut DrNetwork,
    net: dynroute::model::Network,
    _dir: tempfile::TempDir,
}

impl Drop for Loaded {
    fn drop(&mut self) {
        unsafe { dr_network_free(self.handle) };
    }
}

fn load() -> Loaded {
    let dir = tempfile::tempdir().unwrap();
    let net = build_network(&small_config(), 3).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &network_checkpoint(&net, None)).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { dr_network_load(c.as_ptr(), &mut handle) }, DrStatus::Ok);
    assert!(!handle.is_null());
    Loaded { handle, net, _dir: dir }
}

fn images(n: usize) -> Vec<f64> {
    (0..n * 32 * 32).map(|i| ((i * 37 % 101) as f64) / 100.0).collect()
}

#[test]
fn predict_matches_library() {
    let l = load();
    let (mut size, mut classes) = (0usize, 0usize);
    unsafe {
        assert_eq!(dr_network_input_size(l.handle, &mut size), DrStatus::Ok);
        assert_eq!(dr_network_n_classes(l.handle, &mut classes), DrStatus::Ok);
    }
    assert_eq!((size, classes), (32, 3));
    let px = images(2);
    let mut scores = vec![0.0; 6];
    let st = unsafe { dr_network_predict(l.handle, px.as_ptr(), 2, scores.as_mut_ptr()) };
    assert_eq!(st, DrStatus::Ok);
    let expected = l
        .net
        .forward_eval(&Tensor::new(vec![2, 1, 32, 32], px).unwrap())
        .unwrap();
    assert_eq!(scores.as_slice(), expected.scores().data());
    assert_eq!(last_error(), "");
}

#[test]
fn gradcam_fills_heatmap_and_box() {
    let l = load();
    let px = images(1);
    let mut hm = vec![-1.0; 32 * 32];
    let mut b = DrBox::default();
    let mut detected = 9u8;
    let st = unsafe { dr_network_gradcam(l.handle, px.as_ptr(), 1, 0.1, hm.as_mut_ptr(), &mut b, &mut detected) };
    assert_eq!(st, DrStatus::Ok);
    assert!(hm.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(detected <= 1);
    if detected == 1 {
        assert!(b.w >= 1 && b.x + b.w <= 32 && b.y + b.h <= 32);
    }
    let st = unsafe { dr_network_gradcam(l.handle, px.as_ptr(), 7, 0.1, hm.as_mut_ptr(), &mut b, &mut detected) };
    assert_eq!(st, DrStatus::InvalidArgument);
    assert!(last_error().contains("class 7"));
}

#[test]
fn kernel_routing_matches_library() {
    let f = Matrix::from_fn(3, 10, |i, s| ((i * 10 + s) as f64 * 0.37).sin());
    let w = Matrix::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.9], vec![-0.4, 0.3]]).unwrap();
    let g = gram(&f).unwrap();
    let reference = route_conv1x1_kernel(&g, &Conv1x1CapsuleParams::new(w.clone(), 3).unwrap()).unwrap();
    let mut c = vec![0.0; 6];
    let mut norms = vec![0.0; 2];
    let st = unsafe {
        dr_route_conv1x1_kernel(
            g.as_slice().as_ptr(),
            3,
            w.as_slice().as_ptr(),
            2,
            3,
            c.as_mut_ptr(),
            norms.as_mut_ptr(),
        )
    };
    assert_eq!(st, DrStatus::Ok);
    assert_eq!(c.as_slice(), reference.couplings.as_slice());
    assert_eq!(norms, reference.norms);
    let st = unsafe {
        dr_route_conv1x1_kernel(
            g.as_slice().as_ptr(),
            3,
            w.as_slice().as_ptr(),
            2,
            0,
            c.as_mut_ptr(),
            norms.as_mut_ptr(),
        )
    };
    assert_eq!(st, DrStatus::InvalidArgument);
}

#[test]
fn auc_and_undefined() {
    let s = [0.1, 0.4, 0.35, 0.8];
    let l = [0u8, 0, 1, 1];
    let mut out = 0.0;
    assert_eq!(unsafe { dr_auc(s.as_ptr(), l.as_ptr(), 4, &mut out) }, DrStatus::Ok);
    assert_eq!(out, 0.75);
    assert_eq!(Some(out), auc(&s, &[false, false, true, true]));
    let ones = [1u8; 4];
    assert_eq!(
        unsafe { dr_auc(s.as_ptr(), ones.as_ptr(), 4, &mut out) },
        DrStatus::Undefined
    );
}

#[test]
fn error_codes() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { dr_network_load(missing.as_ptr(), &mut handle) }, DrStatus::Io);
    assert!(handle.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { dr_network_load(ptr::null(), &mut handle) },
        DrStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOPE\n").unwrap();
    let c = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dr_network_load(c.as_ptr(), &mut handle) }, DrStatus::Format);

    let mut size = 0;
    assert_eq!(
        unsafe { dr_network_input_size(ptr::null(), &mut size) },
        DrStatus::NullPointer
    );
    let mut out = 0.0;
    assert_eq!(
        unsafe { dr_auc(ptr::null(), ptr::null(), 3, &mut out) },
        DrStatus::NullPointer
    );
    unsafe { dr_network_free(ptr::null_mut()) };
    let v = unsafe { CStr::from_ptr(dr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dynroute.h")).unwrap();
    for name in [
        "dr_last_error_message",
        "dr_version",
        "dr_network_load",
        "dr_network_free",
        "dr_network_input_size",
        "dr_network_n_classes",
        "dr_network_predict",
        "dr_network_gradcam",
        "dr_route_conv1x1_kernel",
        "dr_auc",
        "DR_STATUS_UNDEFINED",
        "typedef struct DrNetwork DrNetwork",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"dynroute.h\"\nint main(void) { DrBox b = {0, 0, 1, 1}; DrStatus s = DR_STATUS_OK; (void)b; return (int)s; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
