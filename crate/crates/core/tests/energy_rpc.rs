use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use dsb_core::energy_rpc::{
    serve_tcp, sum_symbols, timeout_from_env, Endpoint, RemoteEnergy, ServeOptions, Session, DEFAULT_TIMEOUT,
    TIMEOUT_ENV,
};
use dsb_core::targets::{Energy, FnEnergy, LatticeTarget, StateSpace};
use dsb_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TIMEOUT: Duration = Duration::from_secs(10);

fn spawn_server(energy: Arc<dyn Energy>, opts: ServeOptions) -> Endpoint {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let _ = serve_tcp(listener, energy.as_ref(), opts);
    });
    Endpoint::Tcp(addr)
}

fn random_states(space: StateSpace, n: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..space.d).map(|_| rng.gen_range(0..space.c) as u8).collect()).collect()
}

#[test]
fn handshake_sets_client_space() {
    let space = StateSpace::new(16, 8).unwrap();
    let ep = spawn_server(Arc::new(sum_symbols(space)), ServeOptions::default());
    let s = Session::connect(&ep, TIMEOUT).unwrap();
    assert_eq!(s.space(), space);
}

#[test]
fn sum_symbols_round_trip() {
    let space = StateSpace::new(5, 3).unwrap();
    let local = sum_symbols(space);
    let ep = spawn_server(Arc::new(sum_symbols(space)), ServeOptions::default());
    let mut s = Session::connect(&ep, TIMEOUT).unwrap();
    assert_eq!(s.query_energies(&[vec![0, 1, 2, 0, 0]]).unwrap(), vec![8.0]);
    // 4096 fills one request exactly; 5000 needs two
    for n in [4096, 5000] {
        let xs = random_states(space, n, n as u64);
        let remote = s.query_energies(&xs).unwrap();
        let direct = local.energies(&xs).unwrap();
        assert_eq!(remote.len(), n);
        for (a, b) in remote.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn remote_target_matches_in_process_lattice() {
    let target = LatticeTarget::potts(3, 3, 0.7).unwrap();
    let ep = spawn_server(Arc::new(target.clone()), ServeOptions::default());
    let remote = RemoteEnergy::connect("remote-potts", &ep, TIMEOUT).unwrap();
    assert_eq!(remote.space(), target.space());
    let xs = random_states(target.space(), 10_000, 1);
    let a = remote.energies(&xs).unwrap();
    let b = target.energies(&xs).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12);
    }
    assert_eq!(remote.energy(&xs[3]).unwrap(), b[3]);
}

#[test]
fn version_mismatch_is_refused() {
    let space = StateSpace::new(2, 2).unwrap();
    let ep = spawn_server(Arc::new(sum_symbols(space)), ServeOptions { version: 2 });
    match Session::connect(&ep, TIMEOUT) {
        Err(Error::Protocol(msg)) => assert!(msg.contains('2') && msg.contains('1'), "{msg}"),
        other => panic!("expected protocol error, got {other:?}"),
    }
}

#[test]
fn unreachable_endpoints_fail_fast() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    assert!(matches!(Session::connect(&Endpoint::Tcp(addr), TIMEOUT), Err(Error::Io(_))));
    let cmd = Endpoint::Command(vec!["/nonexistent/energy-server".into()]);
    assert!(matches!(Session::connect(&cmd, TIMEOUT), Err(Error::Io(_))));
    assert!(matches!(Session::connect(&Endpoint::Command(vec![]), TIMEOUT), Err(Error::Config(_))));
}

#[test]
fn silent_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut r = BufReader::new(stream.try_clone().unwrap());
        let mut w = stream;
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        w.write_all(b"{\"v\":1,\"d\":2,\"C\":2}\n").unwrap();
        // swallow requests without answering
        while r.read_line(&mut line).map(|n| n > 0).unwrap_or(false) {}
    });
    let mut s = Session::connect(&Endpoint::Tcp(addr), Duration::from_millis(200)).unwrap();
    let start = Instant::now();
    assert!(matches!(s.query_energies(&[vec![0, 1]]), Err(Error::Timeout(_))));
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn non_finite_energy_is_a_protocol_error() {
    let space = StateSpace::new(1, 2).unwrap();
    let e = FnEnergy::new("nan", space, |x| if x[0] == 1 { f64::NAN } else { 0.0 });
    let ep = spawn_server(Arc::new(e), ServeOptions::default());
    let mut s = Session::connect(&ep, TIMEOUT).unwrap();
    assert_eq!(s.query_energies(&[vec![0]]).unwrap(), vec![0.0]);
    assert!(matches!(s.query_energies(&[vec![0], vec![1]]), Err(Error::Protocol(_))));
}

#[test]
fn client_rejects_out_of_space_states() {
    let space = StateSpace::new(2, 2).unwrap();
    let ep = spawn_server(Arc::new(sum_symbols(space)), ServeOptions::default());
    let mut s = Session::connect(&ep, TIMEOUT).unwrap();
    assert!(s.query_energies(&[vec![0, 2]]).is_err());
    assert!(s.query_energies(&[vec![0]]).is_err());
}

#[test]
fn pipelined_requests_are_answered_in_order() {
    let space = StateSpace::new(2, 3).unwrap();
    let Endpoint::Tcp(addr) = spawn_server(Arc::new(sum_symbols(space)), ServeOptions::default()) else {
        unreachable!()
    };
    let stream = TcpStream::connect(addr).unwrap();
    let mut w = stream.try_clone().unwrap();
    for id in 1..=3 {
        writeln!(w, r#"{{"v":1,"id":{id},"op":"energy","states":[[{id},1]]}}"#).unwrap();
    }
    writeln!(w, "not json").unwrap();
    let mut lines = BufReader::new(stream).lines();
    for id in 1..=3u64 {
        let v: serde_json::Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
        assert_eq!(v["id"].as_u64(), Some(id));
        assert_eq!(v["energies"][0].as_f64(), Some(id as f64 + 1.0));
    }
    let v: serde_json::Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
    assert_eq!(v, serde_json::json!({"id": null, "error": "parse"}));
}

#[test]
fn timeout_env_override() {
    // the only test touching the variable
    std::env::remove_var(TIMEOUT_ENV);
    assert_eq!(timeout_from_env().unwrap(), DEFAULT_TIMEOUT);
    std::env::set_var(TIMEOUT_ENV, "2.5");
    assert_eq!(timeout_from_env().unwrap(), Duration::from_millis(2500));
    std::env::set_var(TIMEOUT_ENV, "soon");
    assert!(matches!(timeout_from_env(), Err(Error::Config(_))));
    std::env::set_var(TIMEOUT_ENV, "-1");
    assert!(timeout_from_env().is_err());
    std::env::remove_var(TIMEOUT_ENV);
}

#[test]
fn training_against_remote_target_matches_in_process() {
    use dsb_core::diffusion::{DiffusionSampler, MaskingSchedule, Process};
    use dsb_core::objectives::LossKind;
    use dsb_core::training::{TrainConfig, Trainer};

    let target = LatticeTarget::ising(2, 0.4).unwrap();
    let ep = spawn_server(Arc::new(target.clone()), ServeOptions::default());
    let remote = RemoteEnergy::connect("remote-ising", &ep, TIMEOUT).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 16,
        loss: LossKind::Tb,
        lr: 1e-3,
        weight_decay: 0.0,
        c_lr: 0.1,
        anneal: false,
        off_policy: None,
        eval_every: 5,
        m_eval: 64,
        seed: 4,
    };
    let run = |energy: &dyn Energy| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let process = Process::Masked { schedule: MaskingSchedule::single_step(4) };
        let sampler = DiffusionSampler::new(energy.space(), process, &[16], &mut rng).unwrap();
        let mut t = Trainer::new(cfg.clone(), energy, sampler).unwrap();
        t.run(|_| Ok(())).unwrap();
        t.into_state().history
    };
    assert_eq!(run(&remote), run(&target));
}
