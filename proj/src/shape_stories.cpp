// ShapeStories: a synthetic cartoon-story corpus. Every frame is a pure
// function of its caption (setting => background, character => colour and
// geometry, slot => column, action => row), so captions and labels are
// recoverable from pixels by construction.

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "duco/data.hpp"
#include "duco/errors.hpp"

namespace duco::data {

namespace {

struct Setting {
  std::string name;
  std::uint8_t rgb[3];
};

const std::vector<Setting>& settings() {
  static const std::vector<Setting> s{
      {"park", {30, 70, 30}}, {"beach", {120, 100, 60}}, {"night", {15, 15, 45}},
      {"cave", {60, 50, 50}}, {"sea", {20, 50, 90}},
  };
  return s;
}

const std::vector<std::string> kSlots{"left", "middle", "right"};
const std::vector<std::string> kActions{"jumps", "stands", "sits"};

bool inside(const std::string& shape, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  if (shape == "circle") return dx * dx + dy * dy <= r * r;
  if (shape == "square") return ax <= 0.8 * r && ay <= 0.8 * r;
  if (shape == "triangle") return dy >= -r && dy <= 0.8 * r && ax <= (dy + r) * 0.55;
  if (shape == "diamond") return ax + ay <= r;
  if (shape == "cross") return (ax <= 0.35 * r && ay <= r) || (ay <= 0.35 * r && ax <= r);
  if (shape == "ring") {
    const double d2 = dx * dx + dy * dy;
    return d2 <= r * r && d2 >= 0.3 * r * r;
  }
  if (shape == "hbar") return ax <= r && ay <= 0.45 * r;
  if (shape == "vbar") return ax <= 0.45 * r && ay <= r;
  if (shape == "xshape") return std::abs(ax - ay) <= 0.35 * r && ax <= r && ay <= r;
  return false;
}

struct Placement {
  std::size_t character;
  std::size_t action;
  std::size_t slot;
};

struct ParsedCaption {
  std::size_t setting = 0;
  std::vector<Placement> placements;
};

std::size_t index_of(const std::vector<std::string>& v, const std::string& s) {
  auto it = std::find(v.begin(), v.end(), s);
  return it == v.end() ? v.size() : static_cast<std::size_t>(it - v.begin());
}

ParsedCaption parse(const std::string& caption) {
  const auto toks = tokenize(caption);
  const auto& chars = shape_characters();
  ParsedCaption out;
  bool have_setting = false;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    auto cit = std::find_if(chars.begin(), chars.end(), [&](const ShapeCharacter& c) { return c.name == toks[i]; });
    if (cit != chars.end()) {
      // <name> <action> on the <slot>
      if (i + 4 >= toks.size()) throw DataIntegrityError("malformed ShapeStories caption: " + caption);
      Placement p{static_cast<std::size_t>(cit - chars.begin()), index_of(kActions, toks[i + 1]),
                  index_of(kSlots, toks[i + 4])};
      if (p.action == kActions.size() || p.slot == kSlots.size())
        throw DataIntegrityError("malformed ShapeStories caption: " + caption);
      out.placements.push_back(p);
      i += 4;
    } else if (toks[i] == "in" && i + 2 < toks.size()) {
      const auto& ss = settings();
      auto sit = std::find_if(ss.begin(), ss.end(), [&](const Setting& s) { return s.name == toks[i + 2]; });
      if (sit == ss.end()) throw DataIntegrityError("unknown setting in caption: " + caption);
      out.setting = static_cast<std::size_t>(sit - ss.begin());
      have_setting = true;
      i += 2;
    }
  }
  if (!have_setting || out.placements.empty()) throw DataIntegrityError("malformed ShapeStories caption: " + caption);
  return out;
}

std::string compose(const std::vector<Placement>& placements, std::size_t setting) {
  std::string s;
  for (std::size_t i = 0; i < placements.size(); ++i) {
    const auto& p = placements[i];
    if (i) s += " and ";
    s += shape_characters()[p.character].name + " " + kActions[p.action] + " on the " + kSlots[p.slot];
  }
  return s + " in the " + settings()[setting].name;
}

// Weighted sample of `k` distinct indices.
std::vector<std::size_t> weighted_sample(std::size_t k, std::mt19937_64& rng) {
  const auto& chars = shape_characters();
  std::vector<double> w;
  for (const auto& c : chars) w.push_back(c.weight);
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < k; ++i) {
    std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
    const std::size_t c = dist(rng);
    picked.push_back(c);
    w[c] = 0.0;
  }
  return picked;
}

}  // namespace

const std::vector<ShapeCharacter>& shape_characters() {
  static const std::vector<ShapeCharacter> c{
      {"pip", "circle", {230, 40, 40}, 0.24},   {"bo", "square", {40, 90, 230}, 0.17},
      {"kiki", "triangle", {50, 200, 60}, 0.14}, {"zed", "diamond", {240, 220, 40}, 0.12},
      {"lulu", "cross", {220, 50, 200}, 0.10},  {"momo", "ring", {40, 210, 220}, 0.08},
      {"tak", "hbar", {250, 140, 30}, 0.07},    {"rin", "vbar", {245, 245, 245}, 0.05},
      {"gus", "xshape", {250, 150, 170}, 0.03},
  };
  return c;
}

const std::vector<std::string>& shape_settings() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& s : settings()) n.push_back(s.name);
    return n;
  }();
  return names;
}

Image render_caption(const std::string& caption, std::size_t image_size) {
  const ParsedCaption pc = parse(caption);
  const double S = static_cast<double>(image_size);
  Image im = Image::blank(image_size, image_size);
  const auto& bg = settings()[pc.setting].rgb;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < image_size; ++y)
      for (std::size_t x = 0; x < image_size; ++x) im.at(c, y, x) = bg[c] / 127.5 - 1.0;
  const double col[3] = {0.2, 0.5, 0.8};
  const double row[3] = {0.25, 0.5, 0.75};
  const double r = 0.14 * S;
  for (const auto& p : pc.placements) {
    const auto& ch = shape_characters()[p.character];
    const double cx = col[p.slot] * S, cy = row[p.action] * S;
    for (std::size_t y = 0; y < image_size; ++y)
      for (std::size_t x = 0; x < image_size; ++x)
        if (inside(ch.shape, x + 0.5 - cx, y + 0.5 - cy, r))
          for (std::size_t c = 0; c < 3; ++c) im.at(c, y, x) = ch.rgb[c] / 127.5 - 1.0;
  }
  return im;
}

std::vector<std::uint8_t> labels_from_caption(const std::string& caption) {
  std::vector<std::uint8_t> l(shape_characters().size(), 0);
  for (const auto& p : parse(caption).placements) l[p.character] = 1;
  return l;
}

StoryCorpus generate_shape_stories(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.num_stories < 1) throw ConfigError("num_stories must be >= 1");
  if (cfg.frames_per_story < 1) throw ConfigError("frames_per_story must be >= 1");
  if (cfg.image_size < 8) throw ConfigError("image_size must be >= 8");
  if (cfg.val_fraction < 0 || cfg.test_fraction < 0 || cfg.val_fraction + cfg.test_fraction >= 1.0)
    throw ConfigError("val_fraction + test_fraction must lie in [0, 1)");

  std::mt19937_64 rng(seed);
  StoryCorpus corpus;
  corpus.max_len = cfg.max_len;
  for (const auto& c : shape_characters()) corpus.char_names.push_back(c.name);

  std::vector<std::string> texts;
  for (std::size_t i = 0; i < cfg.num_stories; ++i) {
    Story s;
    char id[32];
    std::snprintf(id, sizeof id, "ss%06zu", i);
    s.id = id;
    const std::size_t setting = std::uniform_int_distribution<std::size_t>(0, settings().size() - 1)(rng);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const std::size_t cast_size = u < 0.2 ? 1 : (u < 0.65 ? 2 : 3);
    const auto cast = weighted_sample(cast_size, rng);
    for (std::size_t k = 0; k < cfg.frames_per_story; ++k) {
      std::size_t count = 1;
      if (cast_size >= 2) count = std::uniform_int_distribution<int>(0, 1)(rng) ? 2 : 1;
      if (cast_size == 3 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < 0.15) count = 3;
      std::vector<std::size_t> members = cast;
      std::shuffle(members.begin(), members.end(), rng);
      std::vector<std::size_t> slots{0, 1, 2};
      std::shuffle(slots.begin(), slots.end(), rng);
      std::vector<Placement> ps;
      for (std::size_t j = 0; j < count; ++j)
        ps.push_back({members[j], std::uniform_int_distribution<std::size_t>(0, kActions.size() - 1)(rng), slots[j]});
      // Left-to-right mention order keeps the caption a function of the pixels.
      std::sort(ps.begin(), ps.end(), [](const Placement& a, const Placement& b) { return a.slot < b.slot; });
      const std::string text = compose(ps, setting);
      texts.push_back(text);
      s.frames.push_back(render_caption(text, cfg.image_size));
      s.char_labels.push_back(labels_from_caption(text));
      s.captions.push_back({text, {}, 0});
    }
    corpus.stories.push_back(std::move(s));
  }

  // Same construction as the on-disk loader, so exported corpora reload
  // with identical token ids.
  corpus.vocab = Vocab::build(texts);
  for (auto& s : corpus.stories)
    for (auto& c : s.captions) c = encode_caption(corpus.vocab, c.text, cfg.max_len);

  std::vector<std::size_t> order(cfg.num_stories);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::floor(cfg.test_fraction * static_cast<double>(cfg.num_stories)));
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(cfg.num_stories)));
  std::map<Split, std::vector<std::string>> splits;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Split sp = i < n_test ? Split::test : (i < n_test + n_val ? Split::val : Split::train);
    splits[sp].push_back(corpus.stories[order[i]].id);
  }
  for (auto& [sp, ids] : splits) std::sort(ids.begin(), ids.end());
  splits.try_emplace(Split::train);
  splits.try_emplace(Split::val);
  splits.try_emplace(Split::test);
  corpus.splits = std::move(splits);
  return corpus;
}

}  // namespace duco::data
