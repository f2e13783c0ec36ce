use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use prepserve::pipeline::{Batch, Element};
use prepserve::records::{Granularity, ShardFile, ShardSpec};
use prepserve::wire::frame::{read_frame, read_preamble, write_preamble, FrameHeader};
use prepserve::wire::*;
use proptest::prelude::*;

fn echo_server() -> Server {
    Server::bind(
        "127.0.0.1:0",
        Arc::new(|req: Message| match req {
            Message::ListTasks { worker_id: 999 } => {
                Message::error(codes::UNKNOWN_WORKER, "no such worker")
            }
            Message::ListTasks { worker_id } => {
                // Stagger replies so responses come back out of order.
                thread::sleep(Duration::from_millis((worker_id * 7) % 20));
                Message::ListTasksResponse {
                    tasks: vec![TaskSpec {
                        job_id: worker_id,
                        job_name: format!("job-{worker_id}"),
                        graph: vec![],
                        policy: ShardingPolicy::Off,
                        mode: JobMode::Independent,
                        num_consumers: 0,
                        worker_index: 0,
                        num_workers: 1,
                        static_shards: vec![],
                    }],
                }
            }
            Message::GetElement(g) => Message::ElementResult(ElementResult::Batch(Batch::new(
                vec![Element::new(g.job_id, 3, vec![1, 2, 3])],
            ))),
            _ => Message::error(codes::BAD_REQUEST, "unsupported"),
        }),
    )
    .unwrap()
}

#[test]
fn hundred_concurrent_calls_are_matched() {
    let server = echo_server();
    let conn =
        Connection::connect(&server.local_addr().to_string(), ConnectOptions::default()).unwrap();
    let handles: Vec<_> = (0..100u64)
        .map(|i| {
            let c = conn.clone();
            thread::spawn(move || {
                let resp = c
                    .call(
                        &Message::ListTasks { worker_id: i },
                        Duration::from_secs(10),
                    )
                    .unwrap();
                match resp {
                    Message::ListTasksResponse { tasks } => assert_eq!(tasks[0].job_id, i),
                    other => panic!("unexpected {other:?}"),
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
}

#[test]
fn remote_error_surfaces() {
    let server = echo_server();
    let conn =
        Connection::connect(&server.local_addr().to_string(), ConnectOptions::default()).unwrap();
    let err = conn
        .call(
            &Message::ListTasks { worker_id: 999 },
            Duration::from_secs(5),
        )
        .unwrap_err();
    assert_eq!(
        err,
        WireError::RemoteError {
            code: codes::UNKNOWN_WORKER,
            detail: "no such worker".into()
        }
    );
}

#[test]
fn dead_endpoint_is_connection_lost() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let err = Connection::connect(
        &addr.to_string(),
        ConnectOptions {
            connect_timeout: Some(Duration::from_millis(500)),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, WireError::ConnectionLost(_)), "{err:?}");
}

#[test]
fn server_shutdown_fails_in_flight_and_later_calls() {
    let server = echo_server();
    let conn =
        Connection::connect(&server.local_addr().to_string(), ConnectOptions::default()).unwrap();
    conn.call(&Message::ListTasks { worker_id: 1 }, Duration::from_secs(5))
        .unwrap();
    server.shutdown();
    let err = conn
        .call(&Message::ListTasks { worker_id: 2 }, Duration::from_secs(5))
        .unwrap_err();
    assert!(matches!(err, WireError::ConnectionLost(_)), "{err:?}");
}

#[test]
fn unknown_type_gets_error_and_connection_survives() {
    let server = echo_server();
    let mut s = TcpStream::connect(server.local_addr()).unwrap();
    write_preamble(&mut s).unwrap();
    read_preamble(&mut s).unwrap();
    let mut bad = FrameHeader {
        length: 4,
        msg_type: 0xffff,
        correlation_id: 5,
        flags: 0,
    }
    .encode()
    .to_vec();
    bad.extend_from_slice(b"abcd");
    s.write_all(&bad).unwrap();
    s.write_all(&encode_frame(&Message::ListTasks { worker_id: 3 }, 6, false).unwrap())
        .unwrap();
    let mut seen = Vec::new();
    for _ in 0..2 {
        let f = read_frame(&mut s).unwrap().unwrap();
        seen.push((f.header.correlation_id, f.message.unwrap()));
    }
    seen.sort_by_key(|(id, _)| *id);
    assert!(matches!(&seen[0].1, Message::Error { code, .. } if *code == codes::UNKNOWN_TYPE));
    assert!(matches!(&seen[1].1, Message::ListTasksResponse { .. }));
}

#[test]
fn compressed_calls_round_trip() {
    let server = echo_server();
    let conn = Connection::connect(
        &server.local_addr().to_string(),
        ConnectOptions {
            compress: true,
            ..Default::default()
        },
    )
    .unwrap();
    let resp = conn
        .call(
            &Message::GetElement(GetElement {
                job_id: 8,
                client_id: 1,
                consumer_index: None,
                round: None,
            }),
            Duration::from_secs(5),
        )
        .unwrap();
    match resp {
        Message::ElementResult(ElementResult::Batch(b)) => assert_eq!(b.elements[0].key, 8),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn bad_preamble_is_dropped() {
    let server = echo_server();
    let mut s = TcpStream::connect(server.local_addr()).unwrap();
    s.write_all(b"GET / HTTP/1.1\r\n\r\n").unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut buf = [0u8; 16];
    assert_eq!(s.read(&mut buf).unwrap_or(0), 0);
}

fn arb_element() -> impl Strategy<Value = Element> {
    (
        any::<u64>(),
        0u32..512,
        prop::collection::vec(any::<u8>(), 0..64),
    )
        .prop_map(|(k, l, p)| Element::new(k, l, p))
}

fn arb_batch() -> impl Strategy<Value = Batch> {
    (
        prop::collection::vec(arb_element(), 1..6),
        prop::option::of(0u32..8),
        prop::option::of(any::<u64>()),
    )
        .prop_map(|(els, bucket, round)| {
            let mut b = Batch::new(els);
            b.bucket_id = bucket;
            b.producer_round = round;
            b
        })
}

fn arb_shard() -> impl Strategy<Value = ShardSpec> {
    (any::<u64>(), 0u32..4, 1u64..100).prop_map(|(id, idx, n)| ShardSpec {
        shard_id: id,
        granularity: Granularity::File,
        files: vec![ShardFile {
            index: idx,
            path: format!("/data/part-{idx:05}.dfrg"),
            count: n,
        }],
        range: None,
    })
}

fn arb_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        "[a-z0-9:.]{0,20}".prop_map(|a| Message::RegisterWorker { address: a }),
        (any::<u64>(), any::<u64>()).prop_map(|(j, w)| Message::GetSplit {
            job_id: j,
            worker_id: w
        }),
        prop::option::of(arb_shard()).prop_map(Message::SplitResponse),
        (
            any::<u64>(),
            prop::collection::vec((any::<u64>(), 0u8..3), 0..5)
        )
            .prop_map(|(w, ts)| {
                Message::Heartbeat {
                    worker_id: w,
                    tasks: ts
                        .into_iter()
                        .map(|(j, s)| TaskReport {
                            job_id: j,
                            state: [TaskState::Running, TaskState::Done, TaskState::Failed]
                                [s as usize],
                        })
                        .collect(),
                }
            }),
        (
            any::<u64>(),
            any::<u64>(),
            prop::option::of(0u32..16),
            prop::option::of(any::<u64>())
        )
            .prop_map(|(j, c, i, r)| Message::GetElement(GetElement {
                job_id: j,
                client_id: c,
                consumer_index: i,
                round: r,
            })),
        arb_batch().prop_map(|b| Message::ElementResult(ElementResult::Batch(b))),
        Just(Message::ElementResult(ElementResult::Pending)),
        Just(Message::ElementResult(ElementResult::EndOfJob)),
        (
            any::<u64>(),
            any::<bool>(),
            prop::collection::vec((any::<u64>(), "[a-z:0-9]{1,12}"), 0..4)
        )
            .prop_map(|(j, f, ws)| Message::JobUpdate(JobUpdate {
                job_id: j,
                finished: f,
                workers: ws
                    .into_iter()
                    .map(|(id, a)| WorkerInfo {
                        worker_id: id,
                        address: a
                    })
                    .collect(),
            })),
        (any::<u16>(), ".{0,30}").prop_map(|(c, d)| Message::Error { code: c, detail: d }),
    ]
}

proptest! {
    #[test]
    fn frame_round_trip(msg in arb_message(), cid in any::<u64>(), compress in any::<bool>()) {
        let frame = encode_frame(&msg, cid, compress).unwrap();
        let (back_cid, back, used) = decode_frame(&frame).unwrap();
        prop_assert_eq!(back_cid, cid);
        prop_assert_eq!(used, frame.len());
        prop_assert_eq!(back, msg);
    }
}
