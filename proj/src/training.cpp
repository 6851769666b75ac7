#include "duco/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "duco/archive.hpp"
#include "duco/errors.hpp"

namespace duco {

namespace {

constexpr const char* kCheckpointMagic = "DUCOCKPT";

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  std::istringstream ss(s);
  ss >> rng;
  if (!ss) throw std::runtime_error("checkpoint holds a malformed RNG state");
}

void check_group(const Archive& ar, const std::string& prefix, const std::vector<NamedTensor>& params) {
  for (const auto& p : params) {
    const auto& a = ar.find(prefix + "." + p.name);
    if (a.shape != p.tensor.shape())
      throw ConfigError("checkpoint array " + a.name + " has shape " + shape_str(a.shape) + ", expected " +
                        shape_str(p.tensor.shape()));
  }
}

void add_adam(Archive& ar, const std::string& prefix, const Adam& opt) {
  const auto& st = opt.state();
  const auto& ps = opt.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ar.arrays.push_back({prefix + ".m." + ps[i].name, ps[i].tensor.shape(), st.m.empty() ? std::vector<double>(ps[i].tensor.numel(), 0.0) : st.m[i]});
    ar.arrays.push_back({prefix + ".v." + ps[i].name, ps[i].tensor.shape(), st.v.empty() ? std::vector<double>(ps[i].tensor.numel(), 0.0) : st.v[i]});
  }
  ar.header["adam"][prefix] = st.steps;
}

AdamState read_adam(const Archive& ar, const std::string& prefix, const Adam& opt) {
  AdamState st;
  for (const auto& p : opt.params()) {
    st.m.push_back(ar.find(prefix + ".m." + p.name).values);
    st.v.push_back(ar.find(prefix + ".v." + p.name).values);
  }
  st.steps = ar.header.at("adam").at(prefix).get<std::uint64_t>();
  return st;
}

Tensor story_vector(const Tensor& sentences) {
  return reshape(sentences, {sentences.dim(0), sentences.dim(1) * sentences.dim(2)});
}

}  // namespace

nlohmann::ordered_json LossRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["L_KL"] = kl;
  j["L_G_adv"] = g_adv;
  j["L_dual"] = dual;
  j["L_D_img"] = d_img;
  j["L_D_story"] = d_story;
  j["L_char"] = char_loss;
  j["lr_g"] = lr_g;
  j["lr_d"] = lr_d;
  return j;
}

bool LossRecord::finite() const {
  return std::isfinite(kl) && std::isfinite(g_adv) && std::isfinite(dual) && std::isfinite(d_img) &&
         std::isfinite(d_story) && std::isfinite(char_loss);
}

StorySampler::StorySampler(std::size_t count, std::uint64_t seed) : perm_(count), rng_(seed) {
  if (count == 0) throw DataIntegrityError("cannot sample from an empty split");
  std::iota(perm_.begin(), perm_.end(), 0);
  std::shuffle(perm_.begin(), perm_.end(), rng_);
}

std::vector<std::size_t> StorySampler::next(std::size_t n) {
  std::vector<std::size_t> out;
  while (out.size() < n) {
    if (pos_ == perm_.size()) {
      std::shuffle(perm_.begin(), perm_.end(), rng_);
      pos_ = 0;
    }
    out.push_back(perm_[pos_++]);
  }
  return out;
}

nlohmann::json StorySampler::state() const {
  return {{"perm", perm_}, {"pos", pos_}, {"rng", rng_to_string(rng_)}};
}

void StorySampler::load_state(const nlohmann::json& j) {
  auto perm = j.at("perm").get<std::vector<std::size_t>>();
  const auto pos = j.at("pos").get<std::size_t>();
  if (perm.size() != perm_.size() || pos > perm.size())
    throw ConfigError("checkpoint sampler state does not match the training split size");
  std::mt19937_64 rng;
  rng_from_string(rng, j.at("rng").get<std::string>());
  perm_ = std::move(perm);
  pos_ = pos;
  rng_ = rng;
}

StoryGenerator build_generator(const RunConfig& cfg, std::size_t vocab_size) {
  std::mt19937_64 rng(cfg.seed);
  return StoryGenerator(cfg.model, vocab_size, cfg.data.frames_per_story, cfg.data.image_size, rng);
}

void load_generator(const std::filesystem::path& checkpoint, const RunConfig& cfg, StoryGenerator& generator) {
  const Archive ar = read_archive(checkpoint, kCheckpointMagic);
  const auto expected = model_hash(cfg);
  const auto got = ar.header.at("model_hash").get<std::uint64_t>();
  if (got != expected)
    throw ConfigError("checkpoint " + checkpoint.string() + " was written for a different model configuration");
  check_group(ar, "G", generator.parameters());
  ar.restore_parameters("G", generator.parameters());
}

Trainer::Trainer(const RunConfig& cfg, const data::StoryDataset& train, const VideoCaptioner* captioner)
    : cfg_(cfg),
      train_(train),
      captioner_(captioner),
      generator_(build_generator(cfg, train.vocab.size())),
      image_disc_([&] {
        std::mt19937_64 r(cfg.seed + 101);
        return ImageDiscriminator(cfg.model, cfg.data.image_size, train.char_names.size(), r);
      }()),
      story_disc_([&] {
        std::mt19937_64 r(cfg.seed + 202);
        return StoryDiscriminator(cfg.model, cfg.data.image_size, cfg.data.frames_per_story, r);
      }()),
      opt_g_(generator_.parameters(), cfg.train.lr_g, cfg.train.beta1, cfg.train.beta2),
      opt_di_(image_disc_.parameters(), cfg.train.lr_d, cfg.train.beta1, cfg.train.beta2),
      opt_ds_(story_disc_.parameters(), cfg.train.lr_d, cfg.train.beta1, cfg.train.beta2),
      rng_(cfg.seed + 303),
      sampler_(train.stories.size(), cfg.seed + 404) {
  cfg.validate();
  if (cfg.train.lambda_dual != 0.0) {
    if (!captioner) throw DependencyError("pretrain captioner first");
    if (!captioner->frozen()) throw ContractError("the dual captioner must be frozen before GAN training");
  }
  if (train.frames_per_story() != cfg.data.frames_per_story)
    throw ConfigError("training split has " + std::to_string(train.frames_per_story()) + " frames per story, config says " +
                      std::to_string(cfg.data.frames_per_story));
  steps_per_epoch_ = std::max<std::size_t>(1, train.stories.size() / cfg.train.story_batch);
  apply_lr();
}

double Trainer::lr_g_for_epoch(std::uint64_t epoch) const {
  return cfg_.train.lr_g * std::pow(cfg_.train.lr_decay_factor, static_cast<double>(epoch / cfg_.train.lr_decay_every));
}

double Trainer::lr_d_for_epoch(std::uint64_t epoch) const {
  return cfg_.train.lr_d * std::pow(cfg_.train.lr_decay_factor, static_cast<double>(epoch / cfg_.train.lr_decay_every));
}

void Trainer::apply_lr() {
  opt_g_.set_lr(lr_g_for_epoch(epoch()));
  opt_di_.set_lr(lr_d_for_epoch(epoch()));
  opt_ds_.set_lr(lr_d_for_epoch(epoch()));
}

Tensor Trainer::frames_h0(const Tensor& h0) const {
  const std::size_t B = h0.dim(0), T = cfg_.data.frames_per_story, d = h0.dim(1);
  return reshape(expand(unsqueeze(h0, 1), {B, T, d}), {B * T, d});
}

LossRecord Trainer::step() {
  apply_lr();
  const std::size_t T = cfg_.data.frames_per_story, S = cfg_.data.image_size;
  LossRecord rec;
  rec.step = step_;
  rec.epoch = epoch();
  rec.lr_g = opt_g_.lr();
  rec.lr_d = opt_di_.lr();

  // (a) image discriminator
  {
    const auto stories = pick(train_, sampler_.next(cfg_.train.image_batch / T));
    const CaptionBatch cb = make_caption_batch(stories);
    const std::size_t R = cb.rows();
    StoryGenerator::Output fake;
    {
      NoGradGuard guard;
      fake = generator_.forward(cb, rng_);
    }
    Tensor s = fake.text.sentences.detach();
    Tensor h0 = frames_h0(fake.cond.h0.detach());
    Tensor real = reshape(make_image_batch(stories), {R, 3, S, S});
    auto real_out = image_disc_(real, s, h0);
    auto fake_out = image_disc_(reshape(fake.images.detach(), {R, 3, S, S}), s, h0);
    const auto labels = make_label_batch(stories);
    Tensor l_d = discriminator_loss(real_out.prob, fake_out.prob);
    Tensor l_c = char_loss(real_out.char_logits, labels);
    Tensor total = l_d + cfg_.train.lambda_char * l_c;
    rec.d_img = l_d.item();
    rec.char_loss = l_c.item();
    last_di_ = {real_out.prob.detach(), fake_out.prob.detach(), real_out.char_logits.detach(), labels};
    image_disc_.zero_grad();
    total.backward();
    opt_di_.step();
    ++counters_.d_img;
  }

  // (b) story discriminator
  {
    const auto stories = pick(train_, sampler_.next(cfg_.train.story_batch));
    const CaptionBatch cb = make_caption_batch(stories);
    StoryGenerator::Output fake;
    {
      NoGradGuard guard;
      fake = generator_.forward(cb, rng_);
    }
    Tensor story = story_vector(fake.sentences.detach());
    Tensor real_p = story_disc_(make_image_batch(stories), story);
    Tensor fake_p = story_disc_(fake.images.detach(), story);
    Tensor l = discriminator_loss(real_p, fake_p);
    rec.d_story = l.item();
    last_ds_ = {real_p.detach(), fake_p.detach(), Tensor(), {}};
    story_disc_.zero_grad();
    l.backward();
    opt_ds_.step();
    ++counters_.d_story;
  }

  // (c) generator updates on fresh batches
  double kl = 0.0, adv = 0.0, dual = 0.0;
  for (std::size_t u = 0; u < cfg_.train.g_updates; ++u) {
    const auto stories = pick(train_, sampler_.next(cfg_.train.story_batch));
    const CaptionBatch cb = make_caption_batch(stories);
    const std::size_t R = cb.rows();
    auto out = generator_.forward(cb, rng_);
    Tensor s = out.text.sentences.detach();
    Tensor h0 = frames_h0(out.cond.h0.detach());
    auto img = image_disc_(reshape(out.images, {R, 3, S, S}), s, h0);
    Tensor story_p = story_disc_(out.images, story_vector(out.sentences.detach()));
    Tensor l_adv = generator_adv_loss(img.prob, story_p);
    Tensor l_kl = kl_loss(out.cond);
    Tensor total = l_kl + l_adv;
    double dual_v = 0.0;
    if (cfg_.train.lambda_dual != 0.0) {
      Tensor l_dual = captioner_->dual_loss(out.images, cb);
      dual_v = l_dual.item();
      total = total + cfg_.train.lambda_dual * l_dual;
    } else if (captioner_ && captioner_->frozen()) {
      NoGradGuard guard;
      dual_v = captioner_->dual_loss(out.images.detach(), cb).item();
    }
    last_g_ = {img.prob.detach(), story_p.detach(), out.cond.mu.detach(), out.cond.sigma2.detach(),
               out.images.detach(), cb, l_kl.item(), l_adv.item(), dual_v};
    kl += l_kl.item();
    adv += l_adv.item();
    dual += dual_v;
    generator_.zero_grad();
    total.backward();
    image_disc_.zero_grad();
    story_disc_.zero_grad();
    opt_g_.step();
    ++counters_.g;
  }
  const double n = static_cast<double>(cfg_.train.g_updates);
  rec.kl = kl / n;
  rec.g_adv = adv / n;
  rec.dual = dual / n;
  ++step_;
  if (!rec.finite()) {
    if (!cfg_.output_dir.empty()) {
      std::filesystem::create_directories(std::filesystem::path(cfg_.output_dir) / "checkpoints");
      save_checkpoint(std::filesystem::path(cfg_.output_dir) / "checkpoints" / "nan_abort.ckpt");
    }
    throw std::runtime_error("non-finite loss at step " + std::to_string(rec.step) + ": " + rec.to_json().dump());
  }
  return rec;
}

double Trainer::dual_gradient_norm() {
  if (!captioner_ || !captioner_->frozen()) throw DependencyError("pretrain captioner first");
  const auto stories = pick(train_, std::vector<std::size_t>{0});
  const CaptionBatch cb = make_caption_batch(stories);
  std::mt19937_64 rng(cfg_.seed);
  auto out = generator_.forward(cb, rng);
  generator_.zero_grad();
  (cfg_.train.lambda_dual * captioner_->dual_loss(out.images, cb)).backward();
  double norm = 0.0;
  for (auto& p : generator_.parameters()) {
    if (!p.tensor.has_grad()) continue;
    for (double g : const_cast<Tensor&>(p.tensor).grad()) norm += g * g;
  }
  generator_.zero_grad();
  return norm;
}

void Trainer::run(const RunOptions& opts) {
  namespace fs = std::filesystem;
  const fs::path ckpt_dir = opts.out_dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  const std::size_t total_steps = opts.max_steps ? *opts.max_steps
                                  : cfg_.train.max_steps ? cfg_.train.max_steps
                                                         : cfg_.train.epochs * steps_per_epoch_;
  if (step_ == 0) save_checkpoint(ckpt_dir / "init.ckpt");
  double best = -1.0;
  if (step_ > 0) {
    // Resuming: best.ckpt must only be replaced by a better score.
    std::ifstream prev(opts.out_dir / "val_log.jsonl");
    std::string line;
    while (std::getline(prev, line)) {
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_object() && j.contains("val_char_f1") && j["val_char_f1"].is_number())
        best = std::max(best, j["val_char_f1"].get<double>());
    }
  }
  std::ofstream log(opts.out_dir / "loss_log.jsonl", step_ == 0 ? std::ios::trunc : std::ios::app);
  std::ofstream val_log(opts.out_dir / "val_log.jsonl", step_ == 0 ? std::ios::trunc : std::ios::app);
  while (step_ < total_steps) {
    const LossRecord rec = step();
    log << rec.to_json().dump() << '\n';
    log.flush();
    if (opts.on_step) opts.on_step(rec);
    if (step_ % steps_per_epoch_ == 0) {
      const std::uint64_t done = step_ / steps_per_epoch_;  // completed epochs
      if (done % cfg_.train.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03llu.ckpt", static_cast<unsigned long long>(done));
        save_checkpoint(ckpt_dir / name);
      }
      if (opts.on_epoch_end) {
        const auto score = opts.on_epoch_end(done);
        nlohmann::ordered_json j;
        j["epoch"] = done;
        j["step"] = step_;
        j["val_char_f1"] = score ? nlohmann::ordered_json(*score) : nlohmann::ordered_json(nullptr);
        val_log << j.dump() << '\n';
        val_log.flush();
        if (score && *score > best) {
          best = *score;
          save_checkpoint(ckpt_dir / "best.ckpt");
        }
      }
    }
  }
  save_checkpoint(ckpt_dir / "last.ckpt");
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  Archive ar;
  ar.header["kind"] = "checkpoint";
  ar.header["preset"] = cfg_.preset;
  ar.header["model_hash"] = model_hash(cfg_);
  ar.header["vocab_hash"] = train_.vocab.hash();
  ar.header["step"] = step_;
  ar.header["counters"] = {{"d_img", counters_.d_img}, {"d_story", counters_.d_story}, {"g", counters_.g}};
  ar.header["rng"] = rng_to_string(rng_);
  ar.header["sampler"] = sampler_.state();
  ar.header["config"] = to_json(cfg_);
  ar.add_parameters("G", generator_.parameters());
  ar.add_parameters("DI", image_disc_.parameters());
  ar.add_parameters("DS", story_disc_.parameters());
  add_adam(ar, "adamG", opt_g_);
  add_adam(ar, "adamDI", opt_di_);
  add_adam(ar, "adamDS", opt_ds_);
  write_archive(path, kCheckpointMagic, ar);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const Archive ar = read_archive(path, kCheckpointMagic);
  const auto expected = model_hash(cfg_);
  if (ar.header.at("model_hash").get<std::uint64_t>() != expected)
    throw ConfigError("checkpoint " + path.string() + " was written for a different model configuration (preset " +
                      ar.header.value("preset", std::string("?")) + ")");
  if (ar.header.at("vocab_hash").get<std::uint64_t>() != train_.vocab.hash())
    throw ConfigError("checkpoint " + path.string() + " was written for a different vocabulary");
  // Validate everything before touching any state.
  check_group(ar, "G", generator_.parameters());
  check_group(ar, "DI", image_disc_.parameters());
  check_group(ar, "DS", story_disc_.parameters());
  const AdamState sg = read_adam(ar, "adamG", opt_g_);
  const AdamState sdi = read_adam(ar, "adamDI", opt_di_);
  const AdamState sds = read_adam(ar, "adamDS", opt_ds_);
  StorySampler sampler = sampler_;
  sampler.load_state(ar.header.at("sampler"));
  std::mt19937_64 rng;
  rng_from_string(rng, ar.header.at("rng").get<std::string>());

  ar.restore_parameters("G", generator_.parameters());
  ar.restore_parameters("DI", image_disc_.parameters());
  ar.restore_parameters("DS", story_disc_.parameters());
  opt_g_.load_state(sg);
  opt_di_.load_state(sdi);
  opt_ds_.load_state(sds);
  sampler_ = sampler;
  rng_ = rng;
  step_ = ar.header.at("step").get<std::uint64_t>();
  const auto& c = ar.header.at("counters");
  counters_ = {c.at("d_img").get<std::uint64_t>(), c.at("d_story").get<std::uint64_t>(), c.at("g").get<std::uint64_t>()};
  apply_lr();
}

}  // namespace duco
