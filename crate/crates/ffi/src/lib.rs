//! C ABI over the `mapnav` grid world, oracle planner and experiment harness.
//!
//! Objects cross the boundary as opaque handles created by `nav_*_new` style
//! functions and released with the matching `nav_*_free`. Every fallible call
//! returns a [`NavStatus`]; on failure [`nav_last_error_message`] describes it.
//! Strings returned to C are owned by the caller and go back through
//! [`nav_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mapnav::gridworld::{generate_map, step, Action, GridMap, MapStyle, NoiseModel, Pose};
use mapnav::harness::{run_policy_eval, summarize, CheckpointStore, EpisodeResult, ExperimentConfig, HarnessError, Split};
use mapnav::planner::{oracle_plan, PathPlan};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NavStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    MissingCheckpoint = 4,
    Runtime = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(s).expect("nul bytes removed")));
}

fn fail(status: NavStatus, msg: impl Into<String>) -> NavStatus {
    set_error(msg);
    status
}

fn harness_status(e: &HarnessError) -> NavStatus {
    match e {
        HarnessError::Config(_) => NavStatus::Config,
        HarnessError::MissingCheckpoints(_) => NavStatus::MissingCheckpoint,
        _ => NavStatus::Runtime,
    }
}

/// Runs `f`, turning panics into [`NavStatus::Panic`].
fn guard(f: impl FnOnce() -> NavStatus) -> NavStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            fail(NavStatus::Panic, format!("panic: {}", msg.unwrap_or_else(|| "unknown".into())))
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, NavStatus> {
    if p.is_null() {
        return Err(fail(NavStatus::NullPointer, "string argument is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(NavStatus::InvalidArgument, "string argument is not UTF-8"))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

macro_rules! non_null {
    ($($p:expr),+) => {
        $(if $p.is_null() {
            return fail(NavStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Message of the last failed call on this thread, or null if none. Free
/// the result with [`nav_string_free`].
#[no_mangle]
pub extern "C" fn nav_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |s| s.clone().into_raw()))
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn nav_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Position and heading (0 east, 1 north, 2 west, 3 south).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NavPose {
    pub x: u32,
    pub y: u32,
    pub heading: u8,
}

impl From<Pose> for NavPose {
    fn from(p: Pose) -> Self {
        NavPose { x: p.x as u32, y: p.y as u32, heading: p.d }
    }
}

impl NavPose {
    fn pose(self) -> Result<Pose, NavStatus> {
        if self.heading > 3 {
            return Err(fail(NavStatus::InvalidArgument, format!("heading {} is not in 0..4", self.heading)));
        }
        Ok(Pose::new(self.x as usize, self.y as usize, self.heading))
    }
}

/// Opaque environment.
pub struct NavMap(GridMap);

/// `style`: 0 rooms, 1 maze, 2 open.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nav_map_generate(seed: u64, width: u32, height: u32, style: u32, out: *mut *mut NavMap) -> NavStatus {
    guard(|| {
        non_null!(out);
        let style = match style {
            0 => MapStyle::Rooms,
            1 => MapStyle::Maze,
            2 => MapStyle::Open,
            s => return fail(NavStatus::InvalidArgument, format!("unknown map style {s}")),
        };
        match generate_map(seed, width as usize, height as usize, style) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(NavMap(m)));
                NavStatus::Ok
            }
            Err(e) => fail(NavStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nav_map_from_json(json: *const c_char, out: *mut *mut NavMap) -> NavStatus {
    guard(|| {
        non_null!(out);
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match GridMap::from_json(text) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(NavMap(m)));
                NavStatus::Ok
            }
            Err(e) => fail(NavStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `map` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nav_map_to_json(map: *const NavMap, out: *mut *mut c_char) -> NavStatus {
    guard(|| {
        non_null!(map, out);
        *out = to_c_string((*map).0.to_json());
        NavStatus::Ok
    })
}

/// # Safety
/// `map`, `width` and `height` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nav_map_size(map: *const NavMap, width: *mut u32, height: *mut u32) -> NavStatus {
    guard(|| {
        non_null!(map, width, height);
        *width = (*map).0.width() as u32;
        *height = (*map).0.height() as u32;
        NavStatus::Ok
    })
}

/// # Safety
/// `map` and `free` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nav_map_is_free(map: *const NavMap, x: u32, y: u32, free: *mut bool) -> NavStatus {
    guard(|| {
        non_null!(map, free);
        let m = &(*map).0;
        if !m.in_bounds(x as i64, y as i64) {
            return fail(NavStatus::InvalidArgument, format!("cell ({x},{y}) is outside the map"));
        }
        *free = m.is_free(x as usize, y as usize);
        NavStatus::Ok
    })
}

/// # Safety
/// `map` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn nav_map_free(map: *mut NavMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Opaque planned action sequence.
pub struct NavPlan(PathPlan);

/// Shortest action sequence from `start` to the goal cell.
///
/// # Safety
/// `map` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nav_oracle_plan(map: *const NavMap, start: NavPose, goal_x: u32, goal_y: u32, out: *mut *mut NavPlan) -> NavStatus {
    guard(|| {
        non_null!(map, out);
        let start = match start.pose() {
            Ok(p) => p,
            Err(s) => return s,
        };
        let m = &(*map).0;
        if !m.pose_is_free(&start) {
            return fail(NavStatus::InvalidArgument, "start pose is not in free space");
        }
        match oracle_plan(m, start, (goal_x as usize, goal_y as usize)) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(NavPlan(p)));
                NavStatus::Ok
            }
            Err(e) => fail(NavStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `plan` must be a live handle, or null (length 0).
#[no_mangle]
pub unsafe extern "C" fn nav_plan_len(plan: *const NavPlan) -> usize {
    if plan.is_null() {
        0
    } else {
        (*plan).0.actions.len()
    }
}

/// Copies up to `cap` action codes (0 stay, 1 left, 2 right, 3 forward)
/// into `buf` and stores the plan length in `len`.
///
/// # Safety
/// `buf` must hold `cap` bytes; `plan` and `len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nav_plan_actions(plan: *const NavPlan, buf: *mut u8, cap: usize, len: *mut usize) -> NavStatus {
    guard(|| {
        non_null!(plan, len);
        let actions = &(*plan).0.actions;
        *len = actions.len();
        if cap > 0 {
            non_null!(buf);
            for (i, a) in actions.iter().take(cap).enumerate() {
                *buf.add(i) = a.code() as u8;
            }
        }
        NavStatus::Ok
    })
}

/// # Safety
/// `plan` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn nav_plan_free(plan: *mut NavPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Opaque simulator: a map, actuation noise and its own random stream.
pub struct NavSim {
    map: GridMap,
    noise: NoiseModel,
    rng: ChaCha8Rng,
}

/// Copies `map` into a new simulator whose Forward fails with `p_fail`.
///
/// # Safety
/// `map` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nav_sim_new(map: *const NavMap, p_fail: f64, seed: u64, out: *mut *mut NavSim) -> NavStatus {
    guard(|| {
        non_null!(map, out);
        if !(0.0..=1.0).contains(&p_fail) {
            return fail(NavStatus::InvalidArgument, format!("p_fail {p_fail} is not a probability"));
        }
        let sim = NavSim { map: (*map).0.clone(), noise: NoiseModel { p_fail }, rng: ChaCha8Rng::seed_from_u64(seed) };
        *out = Box::into_raw(Box::new(sim));
        NavStatus::Ok
    })
}

/// Applies `action` to `pose` in place. `forward_failed` may be null.
///
/// # Safety
/// `sim` and `pose` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nav_sim_step(sim: *mut NavSim, pose: *mut NavPose, action: u32, forward_failed: *mut bool) -> NavStatus {
    guard(|| {
        non_null!(sim, pose);
        let Some(a) = Action::from_code(action as usize) else {
            return fail(NavStatus::InvalidArgument, format!("unknown action code {action}"));
        };
        let p = match (*pose).pose() {
            Ok(p) => p,
            Err(s) => return s,
        };
        let s = &mut *sim;
        if !s.map.pose_is_free(&p) {
            return fail(NavStatus::InvalidArgument, "pose is not in free space");
        }
        let o = step(&s.map, p, a, s.noise, &mut s.rng);
        *pose = o.pose.into();
        if !forward_failed.is_null() {
            *forward_failed = o.forward_failed;
        }
        NavStatus::Ok
    })
}

/// # Safety
/// `sim` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn nav_sim_free(sim: *mut NavSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Mean and 75th percentile of final distance, and percent within the success radius.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavSummary {
    pub mean: f64,
    pub p75: f64,
    pub success: f64,
}

/// # Safety
/// `distances` must hold `n` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nav_summarize(distances: *const u32, n: usize, out: *mut NavSummary) -> NavStatus {
    guard(|| {
        non_null!(out);
        if n == 0 {
            return fail(NavStatus::InvalidArgument, "no episodes to summarize");
        }
        non_null!(distances);
        let d = std::slice::from_raw_parts(distances, n);
        let results: Vec<EpisodeResult> = d.iter().enumerate().map(|(i, &f)| EpisodeResult::new("c", i, f, f, 0)).collect();
        match summarize("c", &results) {
            Ok(s) => {
                *out = NavSummary { mean: s.mean, p75: s.p75, success: s.success };
                NavStatus::Ok
            }
            Err(e) => fail(NavStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Validates an experiment configuration; an empty object gives the defaults.
///
/// # Safety
/// `json` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nav_config_validate(json: *const c_char) -> NavStatus {
    guard(|| match read_str(json) {
        Ok(t) => match ExperimentConfig::from_json(t) {
            Ok(_) => NavStatus::Ok,
            Err(e) => fail(harness_status(&e), e.to_string()),
        },
        Err(s) => s,
    })
}

/// Policy evaluation with checkpoints from `out_dir`; the summary CSV goes
/// to `summary_csv`.
///
/// # Safety
/// String arguments must be nul-terminated and `summary_csv` valid.
#[no_mangle]
pub unsafe extern "C" fn nav_run_policy_eval(config_json: *const c_char, out_dir: *const c_char, summary_csv: *mut *mut c_char) -> NavStatus {
    guard(|| {
        non_null!(summary_csv);
        let (cfg, dir) = match (read_str(config_json), read_str(out_dir)) {
            (Ok(c), Ok(d)) => (c, d),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let run = || -> Result<String, HarnessError> {
            let cfg = ExperimentConfig::from_json(cfg)?;
            let store = CheckpointStore::new(Path::new(dir));
            let policies = store.policies(&cfg)?;
            let maps = cfg.maps.generate(Split::Test)?;
            run_policy_eval(&cfg, &maps, &policies)?.results.summary_csv()
        };
        match run() {
            Ok(csv) => {
                *summary_csv = to_c_string(csv);
                NavStatus::Ok
            }
            Err(e) => fail(harness_status(&e), e.to_string()),
        }
    })
}
