#pragma once

#include "core/layers.hpp"

namespace colidr {

// Linear task predictor over the annotated concept scores only; unannotated
// scores have exactly zero effect by construction.
struct TaskHead {
  int n_annotated = 6;
  int classes = 2;
  LinearLayer h;  // head.h

  TaskHead() = default;
  TaskHead(int n_annotated, int classes, Rng& rng);

  struct Prediction {
    Value logits;  // [N, m]
    Value probs;   // softmax rows
  };
  Prediction predict(Tape& t, Value concept_scores) const;

  void collect(ParamRefs& out);
};

// Cross-entropy from logits, mean over batch.
Value pred_loss(const TaskHead::Prediction& pred, const std::vector<int>& labels);

}  // namespace colidr
