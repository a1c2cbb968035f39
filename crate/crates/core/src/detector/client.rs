use std::collections::HashMap;
use std::path::Path;

use super::transport::Transport;
use super::wire::{Operation, Reply, Request, Response, WireDetection, WireQuery};
use super::{DetectRequest, Detection, FinetuneConfig, Lineage, ModelHandle};
use crate::dataset;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Sole owner of a detector stream.
///
/// Several detect calls may be outstanding at once (see
/// [`DetectorClient::detect_pipelined`]); replies are matched by id, not by
/// arrival order. Every reply is validated before it reaches callers.
pub struct DetectorClient {
    transport: Box<dyn Transport>,
    next_id: u64,
    stash: HashMap<u64, Response>,
    lineage: Lineage,
    max_boxes: Option<usize>,
}

impl DetectorClient {
    pub fn new(transport: Box<dyn Transport>, initial: &ModelHandle) -> Self {
        let mut lineage = Lineage::new();
        lineage
            .record(initial)
            .expect("fresh lineage accepts its root");
        Self {
            transport,
            next_id: 1,
            stash: HashMap::new(),
            lineage,
            max_boxes: None,
        }
    }

    /// Keeps at most `n` highest-scoring boxes per request.
    pub fn with_max_boxes(mut self, n: Option<usize>) -> Self {
        self.max_boxes = n;
        self
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn await_reply(&mut self, id: u64) -> Result<Response> {
        if let Some(r) = self.stash.remove(&id) {
            return Ok(r);
        }
        loop {
            let line = self.transport.recv()?;
            let response = Response::parse(&line)?;
            if response.id == id {
                return Ok(response);
            }
            self.stash.insert(response.id, response);
        }
    }

    fn detect_op(model: &ModelHandle, requests: &[DetectRequest]) -> Result<Operation> {
        if let Some(r) = requests.iter().find(|r| r.expression.trim().is_empty()) {
            return Err(Error::Precondition(format!(
                "blank expression for image {}",
                r.image_ref
            )));
        }
        Ok(Operation::Detect {
            model: model.id.clone(),
            requests: requests
                .iter()
                .map(|r| WireQuery {
                    image: r.image_ref.clone(),
                    expression: r.expression.clone(),
                    category_id: r.category_id,
                })
                .collect(),
        })
    }

    /// One detect message; one group per request, score-descending.
    pub fn detect(
        &mut self,
        model: &ModelHandle,
        requests: &[DetectRequest],
    ) -> Result<Vec<Vec<Detection>>> {
        let mut out = self.detect_pipelined(model, &[requests.to_vec()]);
        out.pop().expect("one batch in, one result out")
    }

    /// Sends every batch before reading any reply.
    pub fn detect_pipelined(
        &mut self,
        model: &ModelHandle,
        batches: &[Vec<DetectRequest>],
    ) -> Vec<Result<Vec<Vec<Detection>>>> {
        let mut sent: Vec<Result<u64>> = Vec::with_capacity(batches.len());
        for batch in batches {
            let result = Self::detect_op(model, batch).and_then(|op| {
                let id = self.fresh_id();
                self.transport.send(&Request::new(id, op))?;
                Ok(id)
            });
            sent.push(result);
        }
        sent.into_iter()
            .zip(batches)
            .map(|(id, batch)| {
                let response = self.await_reply(id?)?;
                self.decode_groups(response, batch)
            })
            .collect()
    }

    fn decode_groups(
        &self,
        response: Response,
        requests: &[DetectRequest],
    ) -> Result<Vec<Vec<Detection>>> {
        let groups = match response.reply {
            Reply::Groups(g) => g,
            Reply::Error(e) => return Err(adapter_error(e.kind, e.message)),
            Reply::Model(_) => {
                return Err(Error::protocol(
                    "unexpected_reply",
                    "detect answered with a model id",
                ))
            }
        };
        if groups.len() != requests.len() {
            return Err(Error::protocol(
                "group_mismatch",
                format!("{} requests but {} groups", requests.len(), groups.len()),
            ));
        }
        groups
            .into_iter()
            .zip(requests)
            .map(|(group, req)| {
                let mut dets = group
                    .into_iter()
                    .map(|d| to_detection(d, req))
                    .collect::<Result<Vec<_>>>()?;
                dets.sort_by(|a, b| b.score.total_cmp(&a.score));
                if let Some(n) = self.max_boxes {
                    dets.truncate(n);
                }
                Ok(dets)
            })
            .collect()
    }

    /// Trains a child of `model` on a COCO file and records the lineage.
    pub fn finetune(
        &mut self,
        model: &ModelHandle,
        dataset_path: &Path,
        config: &FinetuneConfig,
    ) -> Result<ModelHandle> {
        config.validate()?;
        if !dataset_path.is_file() {
            return Err(Error::Precondition(format!(
                "finetune dataset {} does not exist",
                dataset_path.display()
            )));
        }
        dataset::load_coco(dataset_path)?;
        if !self.lineage.contains(&model.id) {
            return Err(Error::Precondition(format!(
                "model '{}' is not part of this run",
                model.id
            )));
        }
        let dataset = dataset_path.display().to_string();
        let id = self.fresh_id();
        self.transport.send(&Request::new(
            id,
            Operation::Finetune {
                model: model.id.clone(),
                dataset: dataset.clone(),
                config: config.into(),
            },
        ))?;
        let response = self.await_reply(id)?;
        match response.reply {
            Reply::Model(new_id) => {
                let handle = ModelHandle {
                    id: new_id,
                    parent: Some(model.id.clone()),
                    created_from: dataset,
                };
                self.lineage.record(&handle)?;
                Ok(handle)
            }
            Reply::Error(e) => Err(adapter_error(e.kind, e.message)),
            Reply::Groups(_) => Err(Error::protocol(
                "unexpected_reply",
                "finetune answered with detections",
            )),
        }
    }
}

/// Replies that reject the message itself are protocol errors; anything
/// else is the adapter's own failure.
fn adapter_error(kind: String, message: String) -> Error {
    match kind.as_str() {
        "unknown_model" | "malformed" | "version" | "bad_request" => {
            Error::Protocol { kind, message }
        }
        _ => Error::Adapter { kind, message },
    }
}

fn to_detection(d: WireDetection, req: &DetectRequest) -> Result<Detection> {
    if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
        return Err(Error::protocol(
            "invalid_detection",
            format!("score {} outside [0, 1]", d.score),
        ));
    }
    let [x, y, w, h] = d.bbox;
    let bbox = BBox::from_xywh(x, y, w, h)
        .map_err(|e| Error::protocol("invalid_detection", e.to_string()))?;
    Ok(Detection {
        image_id: req.image_id,
        bbox,
        score: d.score,
        expression: req.expression.clone(),
        category_id: req.category_id,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::detector::wire::Response;

    /// Replays canned replies, optionally out of order.
    struct Canned {
        sent: Vec<Request>,
        replies: VecDeque<String>,
    }

    impl Transport for Canned {
        fn send(&mut self, request: &Request) -> Result<()> {
            self.sent.push(request.clone());
            Ok(())
        }
        fn recv(&mut self) -> Result<String> {
            self.replies.pop_front().ok_or_else(|| Error::Transport {
                message: "drained".into(),
                retryable: false,
                attempts: 1,
            })
        }
    }

    fn client(replies: Vec<Response>) -> DetectorClient {
        let t = Canned {
            sent: vec![],
            replies: replies.iter().map(Response::to_line).collect(),
        };
        DetectorClient::new(Box::new(t), &ModelHandle::base("m0"))
    }

    fn req(expr: &str) -> DetectRequest {
        DetectRequest {
            image_id: 1,
            image_ref: "a.jpg".into(),
            expression: expr.into(),
            category_id: Some(1),
        }
    }

    fn wd(x: f64, score: f64) -> WireDetection {
        WireDetection {
            bbox: [x, 0.0, 10.0, 10.0],
            score,
        }
    }

    #[test]
    fn groups_are_sorted_and_converted() {
        let mut c = client(vec![Response::groups(
            1,
            vec![vec![wd(0.0, 0.2), wd(5.0, 0.9)], vec![]],
        )]);
        let out = c
            .detect(&ModelHandle::base("m0"), &[req("car"), req("bus")])
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0][0].score, 0.9);
        assert_eq!(out[0][0].bbox, BBox::new(5.0, 0.0, 15.0, 10.0).unwrap());
        assert!(out[1].is_empty());
    }

    #[test]
    fn out_of_order_replies_correlate_by_id() {
        let mut c = client(vec![
            Response::groups(2, vec![vec![wd(2.0, 0.5)]]),
            Response::groups(1, vec![vec![wd(1.0, 0.5)]]),
        ]);
        let out = c.detect_pipelined(
            &ModelHandle::base("m0"),
            &[vec![req("a")], vec![req("b")]],
        );
        assert_eq!(out[0].as_ref().unwrap()[0][0].bbox.x_min(), 1.0);
        assert_eq!(out[1].as_ref().unwrap()[0][0].bbox.x_min(), 2.0);
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        for bad in [wd(0.0, 1.5), WireDetection { bbox: [0.0, 0.0, -1.0, 2.0], score: 0.5 }] {
            let mut c = client(vec![Response::groups(1, vec![vec![bad]])]);
            let err = c.detect(&ModelHandle::base("m0"), &[req("a")]).unwrap_err();
            assert!(matches!(err, Error::Protocol { ref kind, .. } if kind == "invalid_detection"));
        }
    }

    #[test]
    fn group_count_mismatch() {
        let mut c = client(vec![Response::groups(1, vec![])]);
        assert!(matches!(
            c.detect(&ModelHandle::base("m0"), &[req("a")]),
            Err(Error::Protocol { .. })
        ));
    }

    #[test]
    fn unknown_model_is_protocol_error() {
        let mut c = client(vec![Response::error(1, "unknown_model", "nope")]);
        assert!(matches!(
            c.detect(&ModelHandle::base("m0"), &[req("a")]),
            Err(Error::Protocol { .. })
        ));
    }

    #[test]
    fn blank_expression_never_hits_the_wire() {
        let mut c = client(vec![]);
        assert!(matches!(
            c.detect(&ModelHandle::base("m0"), &[req("  ")]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn missing_dataset_fails_before_traffic() {
        let mut c = client(vec![]);
        let err = c
            .finetune(
                &ModelHandle::base("m0"),
                Path::new("/nonexistent/dataset.json"),
                &FinetuneConfig::default(),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert_eq!(c.next_id, 1);
    }
}
