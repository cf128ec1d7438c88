#include "rail/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace rail {

namespace {

constexpr double kPi = 3.14159265358979323846;

NetworkParams<float> zero_like(const NetworkParams<float>& p) {
  NetworkParams<float> out;
  for (const auto& e : p.entries)
    out.push(e.first, TensorF::zeros(e.second.shape()));
  return out;
}

TensorF softmax_detached(const TensorF& logits) {
  return softmax_channel(logits, static_cast<TapeF*>(nullptr));
}

void check_finite_logits(const TensorF& logits, const std::string& who) {
  if (!logits.all_finite())
    throw std::runtime_error("non-finite forward output from " + who);
}

std::string breakdown_snapshot(const LossBreakdown& bd) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "ls=%.9g dfs=%.9g u=%.9g t=%.9g cal=%.9g total=%.9g", bd.l_s,
                bd.l_dfs, bd.l_u, bd.l_t, bd.l_cal, bd.total);
  return buf;
}

}  // namespace

TrainerState make_trainer(const NetworkSpec& base_spec,
                          const TrainerConfig& cfg, std::uint64_t seed) {
  validate_spec(base_spec);
  if (cfg.weights.t_max < 2)
    throw std::invalid_argument("TrainerConfig: t_max must be >= 2");
  if (cfg.ema_alpha < 0 || cfg.ema_alpha > 1)
    throw std::invalid_argument("TrainerConfig: ema_alpha must be in [0,1]");
  if (cfg.group_period < 1)
    throw std::invalid_argument("TrainerConfig: group_period must be >= 1");

  TrainerState st;
  st.cfg = cfg;
  st.rng = Rng(seed_mix(seed, 1000));
  const char* ids[4] = {"G1.v", "G1.r", "G2.v", "G2.r"};
  for (int i = 0; i < 4; ++i) {
    StudentSlot& s = st.students[static_cast<std::size_t>(i)];
    s.id = ids[i];
    s.group = i < 2 ? 1 : 2;
    s.spec = base_spec;
    s.spec.variant = (i % 2 == 0) ? NetVariant::vnet : NetVariant::resvnet;
    s.params = build<float>(s.spec, seed_mix(seed, static_cast<std::uint64_t>(i)));
    s.momentum = zero_like(s.params);
  }
  st.teachers[0] = st.students[0].params.clone(false);
  st.teachers[1] = st.students[2].params.clone(false);
  return st;
}

int active_group(const TrainerState& state) {
  return 1 + (state.t / state.cfg.group_period) % 2;
}

double lr_at(int t, int t_max, double lr_base, double lr_min) {
  if (t < 0 || t > t_max)
    throw std::invalid_argument("lr_at: t " + std::to_string(t) +
                                " outside [0, " + std::to_string(t_max) + "]");
  // fractions mirror 1000 / 4000 / 8000 of the reference schedule
  const int warm = std::max(1, static_cast<int>(std::llround(t_max / 8.0)));
  const int anneal_start = static_cast<int>(std::llround(t_max / 2.0));
  if (t < warm) return lr_base * static_cast<double>(t) / warm;
  if (t < anneal_start) return lr_base;
  const double span = static_cast<double>(t_max - anneal_start);
  const double phase = static_cast<double>(t - anneal_start) / span;
  return lr_min + (lr_base - lr_min) * (1.0 + std::cos(kPi * phase)) / 2.0;
}

BestStudentSelection select_best_student(const TrainerState& state,
                                         const TensorF& labeled_x,
                                         const TensorF& gt_onehot,
                                         const TensorF* unlabeled_x) {
  BestStudentSelection sel;
  std::array<TensorF, 4> probs;
  for (int i = 0; i < 4; ++i) {
    const StudentSlot& s = state.students[static_cast<std::size_t>(i)];
    TensorF logits = forward(s.params, s.spec, labeled_x);
    check_finite_logits(logits, s.id);
    probs[static_cast<std::size_t>(i)] = softmax_detached(logits);
    sel.dice_loss[static_cast<std::size_t>(i)] = static_cast<double>(
        soft_dice_loss(probs[static_cast<std::size_t>(i)], gt_onehot).item());
  }
  sel.winner = 0;
  for (int i = 1; i < 4; ++i)
    if (sel.dice_loss[static_cast<std::size_t>(i)] <
        sel.dice_loss[static_cast<std::size_t>(sel.winner)])
      sel.winner = i;  // ties keep the earlier slot
  sel.labeled_probs = probs[static_cast<std::size_t>(sel.winner)];
  sel.labeled_pred = argmax_channel(sel.labeled_probs);
  if (unlabeled_x) {
    const StudentSlot& w = state.students[static_cast<std::size_t>(sel.winner)];
    TensorF logits = forward(w.params, w.spec, *unlabeled_x);
    check_finite_logits(logits, w.id);
    sel.pseudo_probs = softmax_detached(logits);
    sel.pseudo_labels = argmax_channel(sel.pseudo_probs);
  }
  return sel;
}

void ema_update(NetworkParams<float>& teacher,
                const NetworkParams<float>& student, double alpha) {
  if (alpha < 0 || alpha > 1)
    throw std::invalid_argument("ema_update: alpha outside [0,1]");
  if (teacher.entries.size() != student.entries.size())
    throw std::invalid_argument("ema_update: parameter sets do not match");
  const float a = static_cast<float>(alpha);
  const float b = 1.0f - a;
  for (std::size_t i = 0; i < teacher.entries.size(); ++i) {
    auto& te = teacher.entries[i];
    const auto& se = student.entries[i];
    if (te.first != se.first || te.second.shape() != se.second.shape())
      throw std::invalid_argument("ema_update: mismatch at parameter " +
                                  te.first);
    auto tv = te.second.values();
    auto sv = se.second.values();
    for (std::size_t j = 0; j < tv.size(); ++j)
      tv[j] = a * tv[j] + b * sv[j];
  }
}

void sgd_step(StudentSlot& slot, double lr, double momentum,
              double weight_decay) {
  const float lrf = static_cast<float>(lr);
  const float mom = static_cast<float>(momentum);
  const float wd = static_cast<float>(weight_decay);
  for (std::size_t i = 0; i < slot.params.entries.size(); ++i) {
    auto& pe = slot.params.entries[i];
    if (!pe.second.requires_grad())
      throw std::runtime_error("sgd_step: missing gradient for parameter " +
                               pe.first);
    auto theta = pe.second.values();
    auto g = pe.second.grad();
    auto v = slot.momentum.entries[i].second.values();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      v[j] = mom * v[j] + g[j] + wd * theta[j];
      theta[j] -= lrf * v[j];
    }
  }
}

TrainBatch to_train_batch(const SampleBatch& b) {
  TrainBatch tb;
  tb.labeled_x = patch_to_tensor(b.labeled);
  tb.labeled_gt = patch_label_map(b.labeled);
  tb.unlabeled_x = patch_to_tensor(b.unlabeled);
  return tb;
}

IterationRecord train_iteration(TrainerState& state, const TrainBatch& batch) {
  TrainerConfig& cfg = state.cfg;
  const int t = state.t;
  const int group = active_group(state);
  const bool first_term = t < cfg.first_term_horizon;

  IterationRecord rec;
  rec.t = t;
  rec.group = group;
  rec.lr = lr_at(t, cfg.weights.t_max, cfg.lr_base, cfg.lr_min);
  rec.lambda1 = warmup_lambda(t, cfg.weights.t_max, cfg.weights.lambda1_hat);
  rec.lambda2 = warmup_lambda(t, cfg.weights.t_max, cfg.weights.lambda2_hat);

  const bool want_unsup =
      !first_term &&
      (cfg.weights.lambda1_hat != 0.0 || cfg.weights.lambda2_hat != 0.0);
  const bool want_best_pseudo = !first_term && cfg.weights.lambda1_hat != 0.0;
  const bool want_teacher = !first_term && cfg.weights.lambda2_hat != 0.0;

  TensorF gt_onehot = onehot<float>(batch.labeled_gt, cfg.num_classes);
  BestStudentSelection sel =
      select_best_student(state, batch.labeled_x, gt_onehot,
                          want_best_pseudo ? &batch.unlabeled_x : nullptr);
  rec.winner = state.students[static_cast<std::size_t>(sel.winner)].id;

  TensorF teacher_pseudo;
  if (want_teacher) {
    const NetworkParams<float>& tp =
        state.teachers[static_cast<std::size_t>(group - 1)];
    TensorF logits = forward(tp, state.students[0].spec, batch.unlabeled_x);
    check_finite_logits(logits, "teacher.G" + std::to_string(group));
    teacher_pseudo = softmax_detached(logits);
  }

  const int base = (group - 1) * 2;
  for (int k = 0; k < 2; ++k) {
    StudentSlot& slot = state.students[static_cast<std::size_t>(base + k)];
    rec.student_ids[static_cast<std::size_t>(k)] = slot.id;
    slot.params.zero_grads();

    TapeF tape;
    TensorF logits_l = forward(slot.params, slot.spec, batch.labeled_x, &tape);
    TensorF probs_l = softmax_channel(logits_l, &tape);
    LabelMap pred_l = argmax_channel(probs_l);

    BinaryMask3D m_diff = diff_mask(pred_l, sel.labeled_pred);
    BinaryMask3D m_mis = mis_mask(pred_l, batch.labeled_gt);
    BinaryMask3D m_dfs =
        cfg.enable_mis_mask ? diffmis_mask(m_diff, m_mis) : m_diff;

    TotalLossInputs<float> in;
    in.l_s =
        supervised_loss(probs_l, gt_onehot, m_diff, cfg.weights.beta, &tape);
    if (cfg.enable_kl_dfs && cfg.weights.gamma != 0.0)
      in.l_dfs = dfs_loss(probs_l, batch.labeled_gt, m_dfs, &tape);

    LossBreakdown* bd = &rec.breakdown[static_cast<std::size_t>(k)];
    std::int64_t m_div_count = 0;
    if (want_unsup) {
      TensorF logits_u =
          forward(slot.params, slot.spec, batch.unlabeled_x, &tape);
      TensorF probs_u = softmax_channel(logits_u, &tape);
      if (cfg.weights.lambda1_hat != 0.0) {
        in.l_u = unsupervised_loss(probs_u, sel.pseudo_probs, &tape);
        if (cfg.enable_div_mask && cfg.weights.mu != 0.0) {
          LabelMap pseudo_l = argmax_channel(probs_u);
          BinaryMask3D m_div = div_mask(pseudo_l, sel.pseudo_labels);
          m_div_count = m_div.popcount();
          in.l_cal = cal_loss(probs_u, m_div, cfg.num_classes, &tape);
        }
      }
      if (want_teacher)
        in.l_t = teacher_consistency_loss(probs_u, teacher_pseudo, &tape);
    }

    auto [total, breakdown] = total_loss(in, cfg.weights, t, &tape);
    *bd = breakdown;
    bd->m_diff = m_diff.popcount();
    bd->m_mis = m_mis.popcount();
    bd->m_diffmis = m_dfs.popcount();
    bd->m_div = m_div_count;
    if (!std::isfinite(static_cast<double>(total.item())))
      throw std::runtime_error("train_iteration: non-finite total loss for " +
                               slot.id + " at t=" + std::to_string(t) + " [" +
                               breakdown_snapshot(*bd) + "]");

    tape.backward(total);
    sgd_step(slot, rec.lr, cfg.momentum, cfg.weight_decay);
  }

  ema_update(state.teachers[static_cast<std::size_t>(group - 1)],
             state.students[static_cast<std::size_t>(base)].params,
             cfg.ema_alpha);
  ++state.t;
  return rec;
}

IterationRecord supervised_iteration(TrainerState& state,
                                     const TrainBatch& batch) {
  TrainerConfig& cfg = state.cfg;
  const int t = state.t;
  const int group = active_group(state);

  IterationRecord rec;
  rec.t = t;
  rec.group = group;
  rec.lr = lr_at(t, cfg.weights.t_max, cfg.lr_base, cfg.lr_min);
  rec.lambda1 = warmup_lambda(t, cfg.weights.t_max, cfg.weights.lambda1_hat);
  rec.lambda2 = warmup_lambda(t, cfg.weights.t_max, cfg.weights.lambda2_hat);

  TensorF gt_onehot = onehot<float>(batch.labeled_gt, cfg.num_classes);
  const int base = (group - 1) * 2;
  for (int k = 0; k < 2; ++k) {
    StudentSlot& slot = state.students[static_cast<std::size_t>(base + k)];
    rec.student_ids[static_cast<std::size_t>(k)] = slot.id;
    slot.params.zero_grads();

    TapeF tape;
    TensorF logits = forward(slot.params, slot.spec, batch.labeled_x, &tape);
    TensorF probs = softmax_channel(logits, &tape);
    TensorF loss = cross_entropy(probs, gt_onehot, &tape);

    LossBreakdown* bd = &rec.breakdown[static_cast<std::size_t>(k)];
    bd->l_s = static_cast<double>(loss.item());
    bd->total = bd->l_s;
    bd->lambda1 = rec.lambda1;
    bd->lambda2 = rec.lambda2;
    if (!std::isfinite(bd->l_s))
      throw std::runtime_error("supervised_iteration: non-finite loss for " +
                               slot.id + " at t=" + std::to_string(t));

    tape.backward(loss);
    sgd_step(slot, rec.lr, cfg.momentum, cfg.weight_decay);
  }

  ema_update(state.teachers[static_cast<std::size_t>(group - 1)],
             state.students[static_cast<std::size_t>(base)].params,
             cfg.ema_alpha);
  ++state.t;
  return rec;
}

std::string format_record(const IterationRecord& rec) {
  std::ostringstream os;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return std::string(buf);
  };
  os << "t=" << rec.t << " group=" << rec.group << " lr=" << num(rec.lr)
     << " lambda1=" << num(rec.lambda1) << " lambda2=" << num(rec.lambda2)
     << " winner=" << (rec.winner.empty() ? "-" : rec.winner);
  const char* tag[2] = {"sv", "sr"};
  for (int k = 0; k < 2; ++k) {
    const LossBreakdown& bd = rec.breakdown[static_cast<std::size_t>(k)];
    os << " " << tag[k] << "=" << rec.student_ids[static_cast<std::size_t>(k)]
       << " " << tag[k] << "_ls=" << num(bd.l_s)
       << " " << tag[k] << "_dfs=" << num(bd.l_dfs)
       << " " << tag[k] << "_u=" << num(bd.l_u)
       << " " << tag[k] << "_t=" << num(bd.l_t)
       << " " << tag[k] << "_cal=" << num(bd.l_cal)
       << " " << tag[k] << "_total=" << num(bd.total)
       << " " << tag[k] << "_mdiff=" << bd.m_diff
       << " " << tag[k] << "_mmis=" << bd.m_mis
       << " " << tag[k] << "_mdiffmis=" << bd.m_diffmis
       << " " << tag[k] << "_mdiv=" << bd.m_div;
  }
  return os.str();
}

}  // namespace rail
