use std::ffi::{CStr, CString};
use std::ptr;

use latentwarp_ffi::*;

fn last_error() -> String {
    let p = lw_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn grid(c: usize, h: usize, w: usize, data: &[f32]) -> *mut LwGrid {
    let mut g = ptr::null_mut();
    assert_eq!(
        unsafe { lw_grid_new(c, h, w, data.as_ptr(), data.len(), &mut g) },
        LwStatus::Ok
    );
    g
}

fn flow(h: usize, w: usize, du: f32, dv: f32) -> *mut LwFlow {
    let (u, v) = (vec![du; h * w], vec![dv; h * w]);
    let mut f = ptr::null_mut();
    assert_eq!(
        unsafe { lw_flow_new(h, w, u.as_ptr(), v.as_ptr(), h * w, &mut f) },
        LwStatus::Ok
    );
    f
}

fn data(g: *const LwGrid) -> Vec<f32> {
    let (mut c, mut h, mut w) = (0, 0, 0);
    unsafe {
        assert_eq!(lw_grid_dims(g, &mut c, &mut h, &mut w), LwStatus::Ok);
        let mut buf = vec![0.0; c * h * w];
        assert_eq!(lw_grid_copy_data(g, buf.as_mut_ptr(), buf.len()), LwStatus::Ok);
        buf
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(lw_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn integer_warp_shifts_values() {
    let src = grid(1, 1, 4, &[1.0, 2.0, 3.0, 4.0]);
    let f = flow(1, 4, 1.0, 0.0);
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(lw_backward_warp(src, f, LwBoundary::Wrap, &mut out), LwStatus::Ok);
        assert_eq!(data(out), vec![2.0, 3.0, 4.0, 1.0]);
        lw_grid_free(out);
        assert_eq!(lw_backward_warp(src, f, LwBoundary::Clamp, &mut out), LwStatus::Ok);
        assert_eq!(data(out), vec![2.0, 3.0, 4.0, 4.0]);
        lw_grid_free(out);
        assert_eq!(lw_forward_splat(src, f, LwBoundary::Clamp, &mut out), LwStatus::Ok);
        assert_eq!(data(out), vec![0.0, 1.0, 2.0, 3.0]);
        lw_grid_free(out);
        lw_grid_free(src);
        lw_flow_free(f);
    }
}

#[test]
fn occlusion_and_mask_follow_the_threshold_rule() {
    let f = flow(2, 4, 1.0, 0.0);
    let mut o = ptr::null_mut();
    unsafe {
        assert_eq!(lw_occlusion_map(f, LwBoundary::Clamp, &mut o), LwStatus::Ok);
        assert_eq!(data(o), vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        let r = grid(1, 2, 4, &[0.0, 0.0, 0.1, 0.05, 0.0, 0.0, 0.0, 0.0]);
        let mut m = ptr::null_mut();
        assert_eq!(lw_binary_mask(o, r, 5.0, 0.6, &mut m), LwStatus::Ok);
        let (mut h, mut w, mut ones) = (0, 0, 0);
        assert_eq!(lw_mask_dims(m, &mut h, &mut w, &mut ones), LwStatus::Ok);
        assert_eq!((h, w, ones), (2, 4, 5));
        let mut bits = vec![9u8; 8];
        assert_eq!(lw_mask_copy_bits(m, bits.as_mut_ptr(), 8), LwStatus::Ok);
        assert_eq!(bits, vec![0, 1, 0, 1, 0, 1, 1, 1]);

        let mut pooled = ptr::null_mut();
        assert_eq!(lw_mask_to_latent(m, 2, &mut pooled), LwStatus::Ok);
        assert_eq!(lw_mask_dims(pooled, &mut h, &mut w, &mut ones), LwStatus::Ok);
        assert_eq!((h, w), (1, 2));

        assert_eq!(lw_binary_mask(o, r, 5.0, 1.5, &mut m), LwStatus::InvalidArgument);
        assert!(last_error().contains("threshold"));
        for p in [o, r] {
            lw_grid_free(p);
        }
        lw_mask_free(m);
        lw_mask_free(pooled);
        lw_flow_free(f);
    }
}

#[test]
fn files_round_trip_and_report_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let flo = CString::new(dir.path().join("a.flo").to_str().unwrap()).unwrap();
    let lwt = CString::new(dir.path().join("a.lwt").to_str().unwrap()).unwrap();
    let f = flow(3, 2, 0.5, -1.25);
    let g = grid(2, 1, 2, &[1.0, -2.0, 3.5, 0.0]);
    unsafe {
        assert_eq!(lw_flow_write_flo(f, flo.as_ptr()), LwStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(lw_flow_read_flo(flo.as_ptr(), &mut back), LwStatus::Ok);
        let (mut u, mut v) = (vec![0.0; 6], vec![0.0; 6]);
        assert_eq!(lw_flow_copy_data(back, u.as_mut_ptr(), v.as_mut_ptr(), 6), LwStatus::Ok);
        assert_eq!((u[5], v[5]), (0.5, -1.25));

        assert_eq!(lw_grid_write_tensor(g, lwt.as_ptr()), LwStatus::Ok);
        let mut read = ptr::null_mut();
        assert_eq!(lw_grid_read_tensor(lwt.as_ptr(), &mut read), LwStatus::Ok);
        assert_eq!(data(read), data(g));

        assert_eq!(lw_grid_read_tensor(flo.as_ptr(), &mut read), LwStatus::Format);
        let missing = CString::new(dir.path().join("none.flo").to_str().unwrap()).unwrap();
        assert_eq!(lw_flow_read_flo(missing.as_ptr(), &mut back), LwStatus::Io);
        lw_flow_free(back);
        lw_flow_free(f);
        lw_grid_free(g);
    }
}

#[test]
fn null_and_size_errors_are_reported() {
    let mut g = ptr::null_mut();
    unsafe {
        assert_eq!(lw_grid_new(1, 1, 2, ptr::null(), 2, &mut g), LwStatus::NullArgument);
        assert!(last_error().contains("data"));
        assert_eq!(
            lw_grid_new(1, 2, 2, [0.0f32; 3].as_ptr(), 3, &mut g),
            LwStatus::InvalidArgument
        );
        let ok = grid(1, 1, 2, &[1.0, 2.0]);
        let mut small = [0.0f32; 1];
        assert_eq!(lw_grid_copy_data(ok, small.as_mut_ptr(), 1), LwStatus::InvalidArgument);
        let f = flow(2, 2, 0.0, 0.0);
        assert_eq!(
            lw_backward_warp(ok, f, LwBoundary::Clamp, &mut g),
            LwStatus::InvalidArgument
        );
        assert_eq!(
            lw_backward_warp(ok, ptr::null(), LwBoundary::Clamp, &mut g),
            LwStatus::NullArgument
        );
        lw_grid_free(ok);
        lw_flow_free(f);
        lw_grid_free(ptr::null_mut());
    }
}

#[test]
fn synthetic_run_reports_metrics() {
    let spec = CString::new("width=32\nheight=32\nframes=5\nmotion=static\n").unwrap();
    let config = CString::new("interval=2\nsteps=8\nt0=2\n").unwrap();
    let mut bundle = ptr::null_mut();
    let mut run = ptr::null_mut();
    unsafe {
        assert_eq!(lw_bundle_synth(spec.as_ptr(), &mut bundle), LwStatus::Ok);
        let mut n = 0;
        assert_eq!(lw_bundle_len(bundle, &mut n), LwStatus::Ok);
        assert_eq!(n, 5);
        assert_eq!(lw_run_video(bundle, config.as_ptr(), &mut run), LwStatus::Ok);
        assert_eq!(lw_run_len(run, &mut n), LwStatus::Ok);
        assert_eq!(n, 3);
        let (mut index, mut aligned) = (0, 0);
        assert_eq!(lw_run_key_frame(run, 2, &mut index, &mut aligned), LwStatus::Ok);
        assert_eq!((index, aligned), (4, 6));
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(lw_run_latent(run, 0, &mut a), LwStatus::Ok);
        assert_eq!(lw_run_latent(run, 2, &mut b), LwStatus::Ok);
        assert_eq!(data(a), data(b));
        let mut frame = ptr::null_mut();
        assert_eq!(lw_run_frame(run, 1, &mut frame), LwStatus::Ok);
        assert_eq!(data(frame).len(), 3 * 32 * 32);
        let (mut we, mut masked, mut tc) = (1.0, 1.0, 1.0);
        assert_eq!(lw_run_metrics(run, &mut we, &mut masked, &mut tc), LwStatus::Ok);
        assert_eq!((we, masked, tc), (0.0, 0.0, 0.0));
        assert_eq!(lw_run_latent(run, 3, &mut a), LwStatus::InvalidArgument);
        for g in [a, b, frame] {
            lw_grid_free(g);
        }
        lw_run_free(run);

        let single = CString::new("frames=2\n").unwrap();
        let mut one = ptr::null_mut();
        assert_eq!(lw_bundle_synth(single.as_ptr(), &mut one), LwStatus::Ok);
        assert_eq!(lw_run_video(one, ptr::null(), &mut run), LwStatus::Ok);
        assert_eq!(lw_run_metrics(run, &mut we, &mut masked, &mut tc), LwStatus::Ok);
        assert!(we.is_nan() && tc.is_nan());
        lw_run_free(run);
        lw_bundle_free(one);

        let bad = CString::new("steps=4\nt0=9\n").unwrap();
        assert_eq!(lw_run_video(bundle, bad.as_ptr(), &mut run), LwStatus::Format);
        let unknown = CString::new("colour=red\n").unwrap();
        assert_eq!(lw_run_video(bundle, unknown.as_ptr(), &mut run), LwStatus::Format);
        let malformed = CString::new("width=32\nnonsense\n").unwrap();
        assert_eq!(lw_bundle_synth(malformed.as_ptr(), &mut one), LwStatus::Format);
        assert!(last_error().contains("line 2"));
        lw_bundle_free(bundle);
    }
}
