#pragma once

#include <array>
#include <string>

#include "rail/data.hpp"
#include "rail/losses.hpp"
#include "rail/network.hpp"
#include "rail/rng.hpp"

// Dual-group dual-student training with a shared per-group teacher. The two
// groups take turns receiving gradient updates; the idle group still
// provides candidates for best-student selection. Teachers move only via
// the exponential moving average of their group's plain-variant student.

namespace rail {

struct StudentSlot {
  std::string id;  // G1.v, G1.r, G2.v, G2.r
  int group = 1;
  NetworkSpec spec;
  NetworkParams<float> params;
  NetworkParams<float> momentum;  // per-parameter SGD buffers
};

struct TrainerConfig {
  LossWeights weights;
  double ema_alpha = 0.5;
  int first_term_horizon = 0;  // iterations trained on labeled terms only
  int group_period = 1;        // iterations between group flips
  double lr_base = 0.01;
  double lr_min = 1e-5;
  double momentum = 0.9;
  double weight_decay = 0.0004;
  bool enable_kl_dfs = true;    // include the disagreement KL term
  bool enable_mis_mask = true;  // intersect the DFS mask with the error mask
  bool enable_div_mask = true;  // include the confidence modulation term
  int num_classes = 2;
};

struct TrainerState {
  std::array<StudentSlot, 4> students;  // fixed order G1.v, G1.r, G2.v, G2.r
  std::array<NetworkParams<float>, 2> teachers;  // one per group
  TrainerConfig cfg;
  int t = 0;
  Rng rng;  // batch-sampling stream; serialized with checkpoints
};

// Students are seeded independently (seed streams 0..3); each teacher starts
// as a copy of its group's plain-variant student.
TrainerState make_trainer(const NetworkSpec& base_spec, const TrainerConfig& cfg,
                          std::uint64_t seed);

// 1-based active group for iteration t.
int active_group(const TrainerState& state);

// Piecewise schedule: linear warm-up over the first eighth of training,
// constant plateau, cosine descent to lr_min over the second half.
double lr_at(int t, int t_max, double lr_base, double lr_min);

struct BestStudentSelection {
  int winner = 0;  // slot index
  std::array<double, 4> dice_loss{};
  TensorF labeled_probs;   // winner outputs, detached
  LabelMap labeled_pred;
  TensorF pseudo_probs;    // defined only when unlabeled_x was provided
  LabelMap pseudo_labels;
};

// Forward passes on all four students with gradient recording disabled;
// ties resolve by slot order. Pass unlabeled_x = nullptr to restrict the
// selection to supervised outputs (initial phase).
BestStudentSelection select_best_student(const TrainerState& state,
                                         const TensorF& labeled_x,
                                         const TensorF& gt_onehot,
                                         const TensorF* unlabeled_x);

// theta_teacher <- alpha * theta_teacher + (1 - alpha) * theta_student.
void ema_update(NetworkParams<float>& teacher,
                const NetworkParams<float>& student, double alpha);

// v <- momentum*v + g + weight_decay*theta; theta <- theta - lr*v.
void sgd_step(StudentSlot& slot, double lr, double momentum,
              double weight_decay);

struct TrainBatch {
  TensorF labeled_x;   // [1,1,W,H,D]
  LabelMap labeled_gt; // [1,W,H,D]
  TensorF unlabeled_x; // [1,1,W,H,D]
};

TrainBatch to_train_batch(const SampleBatch& b);

struct IterationRecord {
  int t = 0;
  int group = 1;
  double lr = 0;
  double lambda1 = 0;
  double lambda2 = 0;
  std::string winner;  // empty for the supervised trainer
  std::array<std::string, 2> student_ids;
  std::array<LossBreakdown, 2> breakdown;
};

// One full update: selection, masks, losses, backward and SGD for the two
// active students, then the active group's teacher EMA. The inactive group
// only contributes read-only forward passes.
IterationRecord train_iteration(TrainerState& state, const TrainBatch& batch);

// Plain alternating-group supervised reference: cross-entropy only, same
// schedule, SGD and EMA plumbing. Used as the training path for baseline
// runs and as the equivalence oracle for a fully ablated configuration.
IterationRecord supervised_iteration(TrainerState& state,
                                     const TrainBatch& batch);

// Fixed-key-order line for the run log, one per iteration.
std::string format_record(const IterationRecord& rec);

}  // namespace rail
