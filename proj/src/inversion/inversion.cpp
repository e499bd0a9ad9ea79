#include "fccl/inversion/inversion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fccl/nn/loss.hpp"
#include "fccl/util/binary.hpp"
#include "fccl/util/error.hpp"
#include "fccl/util/log.hpp"

namespace fccl::inversion {

GeneratorSpec make_generator(nn::Shape image, int noise_dim, int width, double lo, double hi) {
  if (image.height % 4 != 0 || image.width % 4 != 0) {
    throw ConfigError("generator needs image height and width divisible by 4, got " + image.str());
  }
  if (noise_dim < 1 || width < 2) throw ConfigError("generator noise_dim and width must be positive");
  if (!(hi > lo)) throw ConfigError("generator range must satisfy lo < hi");
  const nn::Shape seed_shape{width, image.height / 4, image.width / 4};
  GeneratorSpec g;
  g.noise_dim = noise_dim;
  g.image = image;
  g.lo = lo;
  g.hi = hi;
  g.body.input_shape = {noise_dim, 1, 1};
  g.body.num_outputs = static_cast<int>(image.size());
  g.body.layers = {
      nn::Affine{static_cast<int>(seed_shape.size())},
      nn::Reshape{seed_shape},
      nn::BatchNorm{},
      nn::Upsample{2},
      nn::Conv{width, 3, 1, 1},
      nn::BatchNorm{},
      nn::Relu{},
      nn::Upsample{2},
      nn::Conv{width / 2, 3, 1, 1},
      nn::BatchNorm{},
      nn::Relu{},
      nn::Conv{image.channels, 3, 1, 1},
      nn::Tanh{},
      nn::Flatten{},
  };
  return g;
}

Generated generate(const GeneratorSpec& gen, const nn::ParameterVector& params, const nn::Tensor& z) {
  Generated out;
  out.tape = nn::forward_tape(gen.body, params, z, nn::Mode::train);
  const nn::Tensor& t = out.tape.output();
  out.images = nn::Tensor(t.batch(), gen.image);
  const double half = 0.5 * (gen.hi - gen.lo);
  auto dst = out.images.values();
  auto src = t.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = gen.lo + half * (src[i] + 1.0);
  return out;
}

std::vector<double> generator_backward(const GeneratorSpec& gen, const nn::ParameterVector& params,
                                       const Generated& out, const nn::Tensor& image_grad) {
  nn::Tensor dt = image_grad.reshaped(out.tape.output().shape());
  const double half = 0.5 * (gen.hi - gen.lo);
  for (double& v : dt.values()) v *= half;
  return nn::backward(gen.body, params, out.tape, dt).params;
}

namespace {

void check_labels(std::span<const int> y, std::span<const int> trained, std::size_t batch) {
  if (y.size() != batch) throw ShapeError("label count does not match synthetic batch");
  for (int c : y) {
    if (std::find(trained.begin(), trained.end(), c) == trained.end()) {
      throw ShapeError("label " + std::to_string(c) + " is not a class the teacher was trained on");
    }
  }
}

void scale(nn::Tensor& t, double s) {
  for (double& v : t.values()) v *= s;
}

void add_into(nn::Tensor& acc, const nn::Tensor& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  auto a = acc.values();
  auto b = g.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// Value of the BN statistics loss on a teacher tape and, when requested, its
// gradient with respect to every BN layer's input, scaled by `weight`.
double bn_loss_on_tape(const Net& teacher, const nn::Tape& tape, double weight, nn::Injections* inj) {
  const auto& layout = teacher.params.layout;
  double total = 0.0;
  if (inj) inj->assign(layout.layers.size(), std::nullopt);
  for (std::size_t l = 0; l < layout.layers.size(); ++l) {
    const auto& ll = layout.layers[l];
    if (ll.kind != nn::LayerKind::batch_norm) continue;
    const auto& rec = tape.batch_norm[static_cast<std::size_t>(ll.bn_index)];
    const std::size_t channels = rec.mean.size();
    double dm = 0.0;
    double dv = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      dm += std::pow(rec.mean[c] - teacher.params.running_mean[ll.bn_offset + c], 2);
      dv += std::pow(rec.var[c] - teacher.params.running_var[ll.bn_offset + c], 2);
    }
    dm = std::sqrt(dm);
    dv = std::sqrt(dv);
    total += dm + dv;
    if (!inj) continue;
    const nn::Tensor& a = tape.input_of(l);
    const std::size_t plane = a.sample_size() / channels;
    const double m = static_cast<double>(a.batch() * plane);
    nn::Tensor g(a.batch(), a.shape());
    for (std::size_t c = 0; c < channels; ++c) {
      const double gm = dm > 0.0 ? (rec.mean[c] - teacher.params.running_mean[ll.bn_offset + c]) / (dm * m) : 0.0;
      const double gv = dv > 0.0 ? (rec.var[c] - teacher.params.running_var[ll.bn_offset + c]) / dv * 2.0 / m : 0.0;
      for (std::size_t n = 0; n < a.batch(); ++n) {
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t i = c * plane + p;
          g(n, i) = weight * (gm + gv * (a(n, i) - rec.mean[c]));
        }
      }
    }
    (*inj)[l] = std::move(g);
  }
  return total;
}

struct DivTerm {
  double value = 0.0;       // <= 0
  nn::Tensor teacher_grad;  // d(value)/d(teacher logits)
  nn::Tensor student_input_grad;
};

DivTerm div_term(const nn::Tensor& teacher_logits, const Net& student, const nn::Tensor& x, double weight,
                 bool want_grad) {
  DivTerm d;
  const nn::Tape st = nn::forward_tape(student.spec, student.params, x, nn::Mode::train);
  const auto tp = nn::argmax_rows(teacher_logits);
  const auto sp = nn::argmax_rows(st.output());
  std::vector<double> w(tp.size());
  bool any = false;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = tp[i] != sp[i] ? 1.0 : 0.0;
    any = any || w[i] > 0.0;
  }
  const auto kl = nn::kl_with_grad(teacher_logits, st.output(), w);
  d.value = -kl.value;
  if (!want_grad) return d;
  d.teacher_grad = kl.teacher_grad;
  scale(d.teacher_grad, -weight);
  if (any && weight != 0.0) {
    nn::Tensor sg = kl.student_grad;
    scale(sg, -weight);
    d.student_input_grad = nn::backward(student.spec, student.params, st, sg, true).inputs;
  }
  return d;
}

}  // namespace

InputLoss gen_ce_loss(const Net& teacher, const nn::Tensor& x, std::span<const int> y,
                      std::span<const int> trained_classes) {
  check_labels(y, trained_classes, x.batch());
  const nn::Tape tape = nn::forward_tape(teacher.spec, teacher.params, x, nn::Mode::eval);
  const auto ce = nn::ce_with_grad(tape.output(), y);
  return {ce.value, nn::backward(teacher.spec, teacher.params, tape, ce.grad, true).inputs};
}

InputLoss gen_div_loss(const Net& teacher, const Net& student, const nn::Tensor& x) {
  const nn::Tape tape = nn::forward_tape(teacher.spec, teacher.params, x, nn::Mode::eval);
  DivTerm d = div_term(tape.output(), student, x, 1.0, true);
  InputLoss out{d.value, nn::backward(teacher.spec, teacher.params, tape, d.teacher_grad, true).inputs};
  if (!d.student_input_grad.empty()) add_into(out.input_grad, d.student_input_grad);
  return out;
}

InputLoss gen_bn_loss(const Net& teacher, const nn::Tensor& x) {
  if (teacher.spec.batch_norm_count() == 0) throw ConfigError("BN statistics loss needs a teacher with batch norm");
  const nn::Tape tape = nn::forward_tape(teacher.spec, teacher.params, x, nn::Mode::eval);
  nn::Injections inj;
  const double value = bn_loss_on_tape(teacher, tape, 1.0, &inj);
  const nn::Tensor zero(tape.output().batch(), tape.output().shape());
  return {value, nn::backward(teacher.spec, teacher.params, tape, zero, true, &inj).inputs};
}

GenLossParts gen_total_loss(const Net& teacher, const Net& student, const nn::Tensor& x,
                            std::span<const int> y, std::span<const int> trained_classes,
                            double lambda_div, double lambda_bn) {
  check_labels(y, trained_classes, x.batch());
  if (teacher.spec.batch_norm_count() == 0) throw ConfigError("BN statistics loss needs a teacher with batch norm");
  GenLossParts parts;
  const nn::Tape tape = nn::forward_tape(teacher.spec, teacher.params, x, nn::Mode::eval);
  auto ce = nn::ce_with_grad(tape.output(), y);
  parts.ce = ce.value;
  nn::Tensor out_grad = ce.grad;
  DivTerm d = div_term(tape.output(), student, x, lambda_div, true);
  parts.div = d.value;
  add_into(out_grad, d.teacher_grad);
  nn::Injections inj;
  parts.bn = bn_loss_on_tape(teacher, tape, lambda_bn, &inj);
  parts.total = parts.ce + lambda_div * parts.div + lambda_bn * parts.bn;
  parts.input_grad = nn::backward(teacher.spec, teacher.params, tape, out_grad, true, &inj).inputs;
  if (!d.student_input_grad.empty()) add_into(parts.input_grad, d.student_input_grad);
  return parts;
}

double distill_student_step(const Net& teacher, Net& student, const nn::Tensor& x, const nn::SgdConfig& sgd,
                            nn::SgdState& state) {
  if (x.batch() == 0) throw ShapeError("distillation batch is empty");
  const nn::Tensor t = nn::forward(teacher.spec, teacher.params, x, nn::Mode::eval);
  auto r = nn::grad(
      student.spec, student.params,
      [&](const nn::Tensor& s) {
        auto kl = nn::kl_with_grad(t, s);
        return nn::LossGrad{kl.value, kl.student_grad};
      },
      x, nn::Mode::train);
  nn::update_running_stats(student.params, r.tape);
  nn::sgd_step(student.params, r.grads.params, sgd, state);
  return r.loss;
}

void SyntheticMemory::add(const nn::Tensor& batch) {
  if (batch.batch() == 0) return;
  if (!(batch.shape() == shape)) throw ShapeError("synthetic batch shape " + batch.shape().str() + " != " + shape.str());
  const std::size_t room = capacity > size() ? capacity - size() : 0;
  const std::size_t take = std::min(room, batch.batch());
  if (take == 0) return;
  std::vector<std::size_t> rows(take);
  std::iota(rows.begin(), rows.end(), 0);
  const nn::Tensor part = take == batch.batch() ? batch : batch.gather(rows);
  samples = samples.batch() == 0 ? part : nn::Tensor::concat(samples, part);
}

nn::Tensor SyntheticMemory::draw(std::size_t n, Rng& rng) const {
  if (empty()) throw ShapeError("cannot draw from an empty synthetic memory");
  std::vector<std::size_t> rows(n);
  if (n <= size()) {
    std::vector<std::size_t> pool(size());
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + rng.index(pool.size() - i);
      std::swap(pool[i], pool[j]);
      rows[i] = pool[i];
    }
  } else {
    for (auto& r : rows) r = rng.index(size());
  }
  return samples.gather(rows);
}

std::string encode_memory(const SyntheticMemory& memory) {
  binary::Writer w;
  w.bytes("FCSM");
  w.u32_le(1);
  w.u64_le(memory.size());
  w.u32_le(static_cast<std::uint32_t>(memory.shape.channels));
  w.u32_le(static_cast<std::uint32_t>(memory.shape.height));
  w.u32_le(static_cast<std::uint32_t>(memory.shape.width));
  w.u32_le(static_cast<std::uint32_t>(memory.provenance));
  w.f64_le(memory.lo);
  w.f64_le(memory.hi);
  w.u64_le(memory.capacity);
  for (const double v : memory.samples.values()) w.f32_le(static_cast<float>(v));
  return w.release();
}

SyntheticMemory decode_memory(std::string_view bytes) {
  binary::Reader r(bytes);
  if (r.bytes(4) != "FCSM") throw DataError(DataError::Kind::bad_magic, "not a synthetic memory file");
  const std::uint32_t version = r.u32_le();
  if (version != 1) throw DataError(DataError::Kind::bad_magic, "unsupported synthetic memory version");
  SyntheticMemory m;
  const std::uint64_t count = r.u64_le();
  m.shape.channels = static_cast<int>(r.u32_le());
  m.shape.height = static_cast<int>(r.u32_le());
  m.shape.width = static_cast<int>(r.u32_le());
  m.provenance = static_cast<int>(r.u32_le());
  m.lo = r.f64_le();
  m.hi = r.f64_le();
  m.capacity = r.u64_le();
  if (count > m.capacity) throw DataError(DataError::Kind::count_mismatch, "synthetic memory exceeds its capacity");
  const std::size_t n = count * m.shape.size();
  if (r.remaining() < n * 4) throw DataError(DataError::Kind::truncated, "synthetic memory file is truncated");
  std::vector<double> values(n);
  for (auto& v : values) v = r.f32_le();
  if (count > 0) m.samples = nn::Tensor(count, m.shape, std::move(values));
  return m;
}

double agreement(const Net& a, const Net& b, const nn::Tensor& x) {
  if (x.batch() == 0) return 0.0;
  const auto pa = nn::argmax_rows(nn::forward(a.spec, a.params, x, nn::Mode::eval));
  const auto pb = nn::argmax_rows(nn::forward(b.spec, b.params, x, nn::Mode::eval));
  std::size_t same = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) same += pa[i] == pb[i];
  return static_cast<double>(same) / static_cast<double>(pa.size());
}

GenerationResult data_generation(const Net& teacher, std::span<const int> trained_classes,
                                 const GenerationConfig& config, int provenance, std::uint64_t seed,
                                 const StudentProbe& probe) {
  if (teacher.spec.batch_norm_count() == 0) throw ConfigError("data generation needs a teacher with batch norm");
  if (config.batch < 1) throw ConfigError("target.batch must be >= 1");
  if (config.capacity < static_cast<std::size_t>(config.batch)) {
    throw ConfigError("synthetic capacity " + std::to_string(config.capacity) + " is smaller than the batch " +
                      std::to_string(config.batch));
  }
  if (trained_classes.empty()) throw ConfigError("data generation needs at least one trained class");
  for (int c : trained_classes) {
    if (c < 0 || c >= teacher.spec.num_outputs) throw ConfigError("trained class outside the teacher head");
  }
  GenerationResult result;
  SyntheticMemory& memory = result.memory;
  memory.capacity = config.capacity;
  memory.provenance = provenance;
  memory.shape = teacher.spec.input_shape;
  memory.lo = config.lo;
  memory.hi = config.hi;

  const auto batch = static_cast<std::size_t>(config.batch);
  const int rounds = config.rounds >= 0
                         ? config.rounds
                         : static_cast<int>((config.capacity + batch - 1) / batch);
  if (rounds == 0) return result;

  const GeneratorSpec gen = make_generator(teacher.spec.input_shape, config.noise_dim, config.generator_width,
                                           config.lo, config.hi);
  Rng gen_init(derive_seed(seed, "generator.init"));
  Rng student_init(derive_seed(seed, "student.init"));
  Rng noise(derive_seed(seed, "noise"));
  Rng draws(derive_seed(seed, "draws"));
  nn::ParameterVector gp = nn::init_params(gen.body, gen_init);
  Net student{teacher.spec, nn::init_params(teacher.spec, student_init)};
  const nn::SgdConfig gen_sgd{config.generator_lr, config.generator_momentum, 0.0};
  const nn::SgdConfig student_sgd{config.student_lr, 0.9, 0.0};
  nn::SgdState gen_state;
  nn::SgdState student_state;

  for (int round = 0; round < rounds && memory.size() < memory.capacity; ++round) {
    nn::Tensor z(batch, {config.noise_dim, 1, 1});
    for (double& v : z.values()) v = noise.normal();
    std::vector<int> y(batch);
    for (int& c : y) c = trained_classes[noise.index(trained_classes.size())];

    RoundTrace trace;
    try {
      for (int step = 0; step < config.generator_steps; ++step) {
        const Generated g = generate(gen, gp, z);
        const GenLossParts parts =
            gen_total_loss(teacher, student, g.images, y, trained_classes, config.lambda_div, config.lambda_bn);
        trace.ce = parts.ce;
        trace.div = parts.div;
        trace.bn = parts.bn;
        trace.total = parts.total;
        if (!std::isfinite(parts.total)) throw NumericError("generator loss is not finite");
        std::vector<double> grad = generator_backward(gen, gp, g, parts.input_grad);
        if (config.generator_clip > 0.0) {
          double norm = 0.0;
          for (double v : grad) norm += v * v;
          norm = std::sqrt(norm);
          if (norm > config.generator_clip) {
            const double scale = config.generator_clip / norm;
            for (double& v : grad) v *= scale;
          }
        }
        nn::sgd_step(gp, grad, gen_sgd, gen_state);
      }
      const nn::Tensor fresh = generate(gen, gp, z).images;
      memory.add(fresh);
      for (int s = 0; s < config.student_steps; ++s) {
        distill_student_step(teacher, student, memory.draw(batch, draws), student_sgd, student_state);
      }
      trace.agreement = agreement(teacher, student, fresh);
    } catch (const NumericError& e) {
      result.report.diverged = true;
      result.report.message = "round " + std::to_string(round) + ": " + e.what();
      log::warn("data generation aborted: " + result.report.message);
      break;
    }
    if (probe) trace.probe = probe(student);
    result.report.rounds.push_back(trace);
  }
  return result;
}

}  // namespace fccl::inversion
