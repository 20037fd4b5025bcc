use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use pbmorl_core::domain::{make_weight, DiscountConfig, Segment, State, Step};
use pbmorl_core::eql::{run_pbmorl, NoHooks, TrainerConfig};
use pbmorl_core::envs::{make_env, EnvKind, Environment};
use pbmorl_core::reward_model::RewardModel;
use pbmorl_core::teacher::{ScriptedTeacher, Teacher, TeacherQuery};
use pbmorl_service::{
    answered_ids, scripted_answer, spawn_server, ErrorBody, HttpTeacher, LabelAck, QueryEnvelope, QueryQueue, QueryStatus, QueueConfig,
    ServiceError, ServiceHooks, StatusReport, WaitMode,
};

fn dst() -> Box<dyn Environment> {
    make_env(EnvKind::DeepSeaTreasure, 0.99).unwrap()
}

fn query(id: u64) -> TeacherQuery {
    let seg = |s: usize, a: usize| Segment::new(vec![Step::new(State::Discrete(s), a), Step::new(State::Discrete(s + 1), a)]).unwrap();
    TeacherQuery::new(id, seg(0, 1), seg(10, 3), make_weight(&[0.25, 0.75]).unwrap())
        .unwrap()
        .with_ground_truth(vec![vec![0.0, -1.0], vec![1.0, -1.0]], vec![vec![0.0, -1.0], vec![0.0, -1.0]])
}

fn queue(cfg: QueueConfig) -> Arc<QueryQueue> {
    Arc::new(QueryQueue::new(cfg))
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn base(addr: SocketAddr) -> String {
    format!("http://{addr}")
}

fn post_label(agent: &ureq::Agent, addr: SocketAddr, id: u64, label: f64) -> (u16, serde_json::Value) {
    let mut resp = agent
        .post(format!("{}/labels", base(addr)))
        .send_json(serde_json::json!({ "query_id": id, "label": label }))
        .unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_json().unwrap())
}

fn get_queries(agent: &ureq::Agent, addr: SocketAddr, limit: usize) -> Vec<QueryEnvelope> {
    agent
        .get(format!("{}/queries?limit={limit}", base(addr)))
        .call()
        .unwrap()
        .body_mut()
        .read_json()
        .unwrap()
}

#[test]
fn queue_is_fifo_bounded_and_unique() {
    let env = dst();
    let q = queue(QueueConfig {
        capacity: 3,
        ..Default::default()
    });
    for id in [4, 7, 9] {
        assert_eq!(q.enqueue(env.as_ref(), query(id)).unwrap(), id);
    }
    assert_eq!(q.enqueue(env.as_ref(), query(11)), Err(ServiceError::QueueFull { capacity: 3 }));
    let ids: Vec<u64> = q.fetch_pending(10).iter().map(|e| e.query_id).collect();
    assert_eq!(ids, [4, 7, 9]);
    assert_eq!(q.fetch_pending(2).len(), 2);
    q.submit_label(7, 1.0).unwrap();
    q.enqueue(env.as_ref(), query(11)).unwrap();
    let ids: Vec<u64> = q.fetch_pending(10).iter().map(|e| e.query_id).collect();
    assert_eq!(ids, [4, 9, 11]);
}

#[test]
fn envelopes_render_states_and_actions() {
    let env = dst();
    let q = queue(QueueConfig::default());
    q.enqueue(env.as_ref(), query(0)).unwrap();
    let e = &q.fetch_pending(1)[0];
    assert_eq!(e.env, "dst");
    assert_eq!(e.weight, [0.25, 0.75]);
    assert_eq!(e.status, QueryStatus::Pending);
    assert_eq!(e.first.steps.len(), 2);
    assert_eq!(e.first.steps[0].action, env.spec().action_names[1]);
    assert_eq!(e.second.steps[1].action, env.spec().action_names[3]);
    assert!(e.first.steps[0].state.cell.is_some());
    assert!(e.created_at > 0);
    assert!(e.ground_truth.is_none());
}

#[test]
fn label_submission_rules() {
    let env = dst();
    let q = queue(QueueConfig::default());
    q.enqueue(env.as_ref(), query(1)).unwrap();
    assert_eq!(q.submit_label(1, 0.7), Err(ServiceError::BadLabel(0.7)));
    assert_eq!(q.submit_label(5, 1.0), Err(ServiceError::UnknownQuery(5)));
    q.submit_label(1, 0.0).unwrap();
    assert_eq!(q.submit_label(1, 0.0).unwrap().status, QueryStatus::Answered);
    assert_eq!(q.submit_label(1, 1.0), Err(ServiceError::AlreadyAnswered { id: 1, label: 0.0 }));
    let records = q.take_answered();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].label.value(), 0.0);
    assert!(q.take_answered().is_empty());
    assert!(q.fetch_pending(10).is_empty());
    assert_eq!(answered_ids(&q).len(), 1);
}

#[test]
fn pending_queries_expire() {
    let env = dst();
    let q = queue(QueueConfig {
        expiry: Some(Duration::from_millis(50)),
        ..Default::default()
    });
    q.enqueue(env.as_ref(), query(1)).unwrap();
    std::thread::sleep(Duration::from_millis(120));
    assert!(q.fetch_pending(10).is_empty());
    assert_eq!(q.submit_label(1, 1.0), Err(ServiceError::Expired(1)));
    assert_eq!(q.envelope(1).unwrap().status, QueryStatus::Expired);
    assert_eq!(q.counts().expired, 1);
    assert!(q.wait_resolved(&[1], Some(Duration::from_millis(10))));
}

#[test]
fn endpoints_follow_the_wire_contract() {
    let env = dst();
    let q = queue(QueueConfig::default());
    let server = spawn_server("127.0.0.1:0".parse().unwrap(), q.clone()).unwrap();
    let addr = server.addr;
    let agent = agent();

    assert!(get_queries(&agent, addr, 5).is_empty());
    for id in 0..4 {
        q.enqueue(env.as_ref(), query(id)).unwrap();
    }
    let got = get_queries(&agent, addr, 3);
    assert_eq!(got.iter().map(|e| e.query_id).collect::<Vec<_>>(), [0, 1, 2]);

    let (code, body) = post_label(&agent, addr, 1, 1.0);
    assert_eq!(code, 200);
    let ack: LabelAck = serde_json::from_value(body).unwrap();
    assert_eq!(ack.status, QueryStatus::Answered);
    assert_eq!(post_label(&agent, addr, 1, 1.0).0, 200);

    let (code, body) = post_label(&agent, addr, 1, 0.5);
    assert_eq!(code, 409);
    assert_eq!(serde_json::from_value::<ErrorBody>(body).unwrap().error, "already_answered");
    let (code, body) = post_label(&agent, addr, 99, 0.0);
    assert_eq!(code, 404);
    assert_eq!(serde_json::from_value::<ErrorBody>(body).unwrap().error, "unknown_query");
    let (code, body) = post_label(&agent, addr, 2, 0.7);
    assert_eq!(code, 422);
    assert_eq!(serde_json::from_value::<ErrorBody>(body).unwrap().error, "bad_label");

    let got = get_queries(&agent, addr, 10);
    assert_eq!(got.iter().map(|e| e.query_id).collect::<Vec<_>>(), [0, 2, 3]);

    let status: StatusReport = agent
        .get(format!("{}/status", base(addr)))
        .call()
        .unwrap()
        .body_mut()
        .read_json()
        .unwrap();
    assert_eq!(status.queue.pending, 3);
    assert_eq!(status.queue.answered, 1);
    server.shutdown().unwrap();
}

#[test]
fn busy_port_is_reported() {
    let q = queue(QueueConfig::default());
    let first = spawn_server("127.0.0.1:0".parse().unwrap(), q.clone()).unwrap();
    assert!(spawn_server(first.addr, q).is_err());
}

fn small_config() -> TrainerConfig {
    TrainerConfig {
        total_timesteps: 3000,
        feedback_frequency: 1000,
        queries_per_round: 20,
        eval_interval: 1000,
        ..TrainerConfig::desk(EnvKind::DeepSeaTreasure)
    }
}

#[test]
fn run_without_labels_completes_and_leaves_reward_model_untouched() {
    let env = dst();
    let cfg = small_config();
    let q = queue(QueueConfig::default());
    let mut teacher = HttpTeacher::new(q.clone(), env.clone_box(), WaitMode::NonBlocking);
    let mut hooks = ServiceHooks::new(q.clone(), Arc::new(AtomicBool::new(false)));
    let run = run_pbmorl(env.as_ref(), &mut teacher, &cfg, 5, &mut hooks).unwrap();
    assert_eq!(run.steps_completed, cfg.total_timesteps);
    assert_eq!(run.preferences, 0);
    assert!(run.queries_issued > 0);
    let fresh = RewardModel::new(env.spec(), &cfg.reward_model, 5 ^ 0x52);
    assert_eq!(run.reward_model.unwrap().params(), fresh.params());
    let status = q.status();
    assert_eq!(status.run.step, cfg.total_timesteps);
    assert!(status.run.eu.is_some());
    assert_eq!(status.queue.pending as u64, run.queries_issued);
}

#[test]
fn stop_flag_ends_the_run() {
    let env = dst();
    let q = queue(QueueConfig::default());
    let mut teacher = HttpTeacher::new(q.clone(), env.clone_box(), WaitMode::NonBlocking);
    let stop = Arc::new(AtomicBool::new(true));
    let mut hooks = ServiceHooks::new(q, stop.clone());
    let run = run_pbmorl(env.as_ref(), &mut teacher, &small_config(), 5, &mut hooks).unwrap();
    assert!(run.stopped_early);
    assert!(run.steps_completed < 3000);
    assert!(stop.load(Ordering::Relaxed));
}

#[test]
fn http_labeler_reproduces_the_scripted_run() {
    let env = dst();
    let cfg = small_config();

    let mut scripted = ScriptedTeacher::new(DiscountConfig::new(cfg.gamma).unwrap());
    let reference = run_pbmorl(env.as_ref(), &mut scripted, &cfg, 9, &mut NoHooks).unwrap();
    assert!(reference.preferences > 0);

    let q = queue(QueueConfig {
        reveal_ground_truth: true,
        ..Default::default()
    });
    let server = spawn_server("127.0.0.1:0".parse().unwrap(), q.clone()).unwrap();
    let addr = server.addr;
    let done = Arc::new(AtomicBool::new(false));
    let labeler = {
        let done = done.clone();
        let gamma = cfg.gamma;
        std::thread::spawn(move || {
            let agent = agent();
            let mut answered = 0;
            while !done.load(Ordering::Relaxed) {
                let batch = get_queries(&agent, addr, 7);
                if batch.is_empty() {
                    std::thread::sleep(Duration::from_millis(5));
                }
                for e in batch {
                    let label = scripted_answer(&e, gamma).unwrap();
                    assert_eq!(post_label(&agent, addr, e.query_id, label).0, 200);
                    answered += 1;
                }
            }
            answered
        })
    };
    let mut teacher = HttpTeacher::new(q.clone(), env.clone_box(), WaitMode::Wait(Some(Duration::from_secs(60))));
    let mut hooks = ServiceHooks::new(q.clone(), Arc::new(AtomicBool::new(false)));
    let served = run_pbmorl(env.as_ref(), &mut teacher, &cfg, 9, &mut hooks).unwrap();
    done.store(true, Ordering::Relaxed);
    let answered = labeler.join().unwrap();

    assert_eq!(answered as u64, served.queries_issued);
    assert_eq!(served.preferences, reference.preferences);
    assert_eq!(
        serde_json::to_string(&served.metrics).unwrap(),
        serde_json::to_string(&reference.metrics).unwrap()
    );
    assert_eq!(teacher.dropped(), 0);
    assert_eq!(teacher.name(), "http");
    server.shutdown().unwrap();
}

#[test]
fn interrupt_releases_a_blocked_wait() {
    let env = dst();
    let q = queue(QueueConfig::default());
    q.enqueue(env.as_ref(), query(1)).unwrap();
    let waiter = {
        let q = q.clone();
        std::thread::spawn(move || q.wait_resolved(&[1], None))
    };
    std::thread::sleep(Duration::from_millis(50));
    q.interrupt();
    assert!(!waiter.join().unwrap());
}
