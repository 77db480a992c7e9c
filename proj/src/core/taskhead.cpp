#include "core/taskhead.hpp"

namespace colidr {

TaskHead::TaskHead(int n, int m, Rng& rng)
    : n_annotated(n), classes(m), h("head.h", n, m, rng) {}

TaskHead::Prediction TaskHead::predict(Tape& t, Value concept_scores) const {
  const Tensor& tc = concept_scores.tensor();
  CLDR_CHECK(tc.ndim() == 2 && tc.dim(1) >= n_annotated, ErrorKind::ShapeMismatch,
             "task head: need >= " << n_annotated << " concept scores, got "
                                   << shape_str(tc.shape));
  Value annotated = slice_cols(concept_scores, 0, n_annotated);
  Prediction p;
  p.logits = h.forward(t, annotated);
  p.probs = softmax_rows(p.logits);
  return p;
}

void TaskHead::collect(ParamRefs& out) { h.collect(out); }

Value pred_loss(const TaskHead::Prediction& pred, const std::vector<int>& labels) {
  return cross_entropy_logits(pred.logits, labels);
}

}  // namespace colidr
