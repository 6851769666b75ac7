#include "duco/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "duco/errors.hpp"
#include "duco/image_io.hpp"

namespace duco::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Fnv {
  std::uint64_t h = 1469598103934665603ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 1099511628211ULL;
    }
  }
  void str(const std::string& s) {
    bytes(s.data(), s.size());
    bytes("\0", 1);
  }
  template <class T>
  void pod(const T& v) {
    bytes(&v, sizeof v);
  }
};

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataIntegrityError("cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw DataIntegrityError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

Vocab::Vocab() : tokens_{"<pad>", "<bos>", "<eos>"} {
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<std::int64_t>(i);
}

Vocab Vocab::build(const std::vector<std::string>& texts) {
  std::set<std::string> seen;
  for (const auto& t : texts)
    for (auto& tok : tokenize(t)) seen.insert(tok);
  Vocab v;
  for (const auto& tok : seen) {
    if (v.index_.count(tok)) continue;
    v.index_[tok] = static_cast<std::int64_t>(v.tokens_.size());
    v.tokens_.push_back(tok);
  }
  return v;
}

std::int64_t Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw std::out_of_range("token '" + token + "' is not in the vocabulary");
  return it->second;
}

const std::string& Vocab::token(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " is not in the vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::uint64_t Vocab::hash() const {
  Fnv f;
  for (const auto& t : tokens_) f.str(t);
  return f.h;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) {
    std::transform(tok.begin(), tok.end(), tok.begin(), [](unsigned char c) { return std::tolower(c); });
    out.push_back(tok);
  }
  return out;
}

std::vector<std::uint8_t> Caption::mask() const {
  std::vector<std::uint8_t> m(ids.size(), 0);
  std::fill(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(length), 1);
  return m;
}

Caption encode_caption(const Vocab& vocab, const std::string& text, std::size_t max_len) {
  auto toks = tokenize(text);
  if (toks.empty()) throw DataIntegrityError("empty caption");
  if (toks.size() > max_len) toks.resize(max_len);
  Caption c;
  c.text = text;
  c.length = toks.size();
  c.ids.assign(max_len, kPad);
  for (std::size_t i = 0; i < toks.size(); ++i) c.ids[i] = vocab.id(toks[i]);
  return c;
}

std::string decode_ids(const Vocab& vocab, const std::vector<std::int64_t>& ids) {
  std::string out;
  for (auto id : ids) {
    if (id == kEos || id == kPad) break;
    if (id == kBos) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

StoryDataset StoryCorpus::select(Split split) const {
  StoryDataset ds;
  ds.split = split;
  ds.vocab = vocab;
  ds.char_names = char_names;
  ds.max_len = max_len;
  auto it = splits.find(split);
  if (it == splits.end()) return ds;
  std::set<std::string> wanted(it->second.begin(), it->second.end());
  for (const auto& s : stories)
    if (wanted.count(s.id)) ds.stories.push_back(s);
  return ds;
}

void validate_story(const Story& story, std::size_t num_characters) {
  const std::string who = "story '" + story.id + "': ";
  const std::size_t T = story.frames.size();
  if (T == 0) throw DataIntegrityError(who + "has no frames");
  if (story.captions.size() != T) throw DataIntegrityError(who + std::to_string(T) + " frames but " +
                                                           std::to_string(story.captions.size()) + " captions");
  if (story.char_labels.size() != T) throw DataIntegrityError(who + std::to_string(T) + " frames but " +
                                                              std::to_string(story.char_labels.size()) + " label rows");
  for (const auto& c : story.captions)
    if (c.length == 0) throw DataIntegrityError(who + "empty caption");
  for (const auto& l : story.char_labels) {
    if (l.size() != num_characters) throw DataIntegrityError(who + "label vector has wrong length");
    for (auto v : l)
      if (v > 1) throw DataIntegrityError(who + "labels must be binary");
  }
  for (const auto& f : story.frames)
    for (double v : f.pixels)
      if (!(v >= -1.0 && v <= 1.0)) throw DataIntegrityError(who + "pixel outside [-1, 1]");
}

const std::vector<std::string>& pororo_characters() {
  static const std::vector<std::string> names{"pororo", "loopy", "crong", "eddy", "poby",
                                              "petty",  "tongtong", "rody", "harry"};
  return names;
}

StoryCorpus load_corpus(const fs::path& root, const LoadOptions& options) {
  const fs::path captions_file = root / "captions.jsonl";
  const fs::path labels_file = root / "labels.jsonl";
  if (!fs::exists(captions_file) || !fs::exists(labels_file))
    throw DataIntegrityError("nothing to load under " + root.string() + " (captions.jsonl / labels.jsonl missing)");
  const fs::path splits_file = root / "splits.json";
  if (!fs::exists(splits_file)) throw ConfigError("split file missing: " + splits_file.string());

  StoryCorpus corpus;
  corpus.max_len = options.max_len;
  corpus.char_names = pororo_characters();
  if (fs::exists(root / "characters.json")) {
    std::ifstream in(root / "characters.json");
    corpus.char_names = json::parse(in).get<std::vector<std::string>>();
  }

  std::map<std::string, std::vector<std::string>> captions;
  std::vector<std::string> all_texts;
  for (const auto& rec : read_jsonl(captions_file)) {
    auto id = rec.at("story_id").get<std::string>();
    auto caps = rec.at("captions").get<std::vector<std::string>>();
    all_texts.insert(all_texts.end(), caps.begin(), caps.end());
    captions[id] = std::move(caps);
  }
  std::map<std::string, std::vector<std::vector<std::uint8_t>>> labels;
  for (const auto& rec : read_jsonl(labels_file))
    labels[rec.at("story_id").get<std::string>()] = rec.at("labels").get<std::vector<std::vector<std::uint8_t>>>();
  corpus.vocab = Vocab::build(all_texts);

  {
    std::ifstream in(splits_file);
    json sj;
    try {
      sj = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("unreadable split file " + splits_file.string() + ": " + e.what());
    }
    for (auto& [name, ids] : sj.items()) corpus.splits[parse_split(name)] = ids.get<std::vector<std::string>>();
  }

  std::set<std::string> listed;
  for (const auto& [split, ids] : corpus.splits)
    for (const auto& id : ids)
      if (!listed.insert(id).second) throw DataIntegrityError("story '" + id + "' appears in more than one split");

  for (const auto& id : listed) {
    Story s;
    s.id = id;
    auto cit = captions.find(id);
    if (cit == captions.end()) throw DataIntegrityError("story '" + id + "': no captions record");
    auto lit = labels.find(id);
    if (lit == labels.end()) throw DataIntegrityError("story '" + id + "': no labels record");
    const fs::path dir = root / "frames" / id;
    std::size_t on_disk = 0;
    if (fs::is_directory(dir))
      for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") ++on_disk;
    const std::size_t T = cit->second.size();
    if (on_disk != T)
      throw DataIntegrityError("story '" + id + "': " + std::to_string(on_disk) + " frames on disk but " +
                               std::to_string(T) + " captions");
    for (std::size_t k = 0; k < T; ++k) {
      const fs::path f = dir / (std::to_string(k) + ".png");
      if (!fs::exists(f)) throw DataIntegrityError("story '" + id + "': missing frame " + f.string());
      s.frames.push_back(resize(read_png(f), options.image_size, options.image_size));
      try {
        s.captions.push_back(encode_caption(corpus.vocab, cit->second[k], options.max_len));
      } catch (const DataIntegrityError& e) {
        throw DataIntegrityError("story '" + id + "': " + e.what());
      }
    }
    s.char_labels = lit->second;
    validate_story(s, corpus.char_names.size());
    corpus.stories.push_back(std::move(s));
  }
  return corpus;
}

StoryDataset load_pororo_sv(const fs::path& root, Split split, const LoadOptions& options) {
  StoryCorpus corpus = load_corpus(root, options);
  if (!corpus.splits.count(split))
    throw ConfigError("split '" + to_string(split) + "' is not listed in " + (root / "splits.json").string());
  return corpus.select(split);
}

void export_pororo_sv(const StoryCorpus& corpus, const fs::path& root) {
  fs::create_directories(root / "frames");
  std::ofstream caps(root / "captions.jsonl");
  std::ofstream labs(root / "labels.jsonl");
  for (const auto& s : corpus.stories) {
    json c{{"story_id", s.id}, {"captions", json::array()}};
    for (const auto& cap : s.captions) c["captions"].push_back(cap.text);
    caps << c.dump() << '\n';
    labs << json{{"story_id", s.id}, {"labels", s.char_labels}}.dump() << '\n';
    for (std::size_t k = 0; k < s.frames.size(); ++k)
      write_png(root / "frames" / s.id / (std::to_string(k) + ".png"), s.frames[k]);
  }
  json sj = json::object();
  for (const auto& [split, ids] : corpus.splits) sj[to_string(split)] = ids;
  std::ofstream(root / "splits.json") << sj.dump(1) << '\n';
  std::ofstream(root / "characters.json") << json(corpus.char_names).dump() << '\n';
}

std::uint64_t fingerprint(const StoryCorpus& corpus) {
  Fnv f;
  f.pod(corpus.vocab.hash());
  for (const auto& n : corpus.char_names) f.str(n);
  for (const auto& s : corpus.stories) {
    f.str(s.id);
    for (const auto& c : s.captions) {
      f.str(c.text);
      f.bytes(c.ids.data(), c.ids.size() * sizeof(std::int64_t));
    }
    for (const auto& l : s.char_labels) f.bytes(l.data(), l.size());
    for (const auto& im : s.frames) f.bytes(im.pixels.data(), im.pixels.size() * sizeof(double));
  }
  for (const auto& [split, ids] : corpus.splits) {
    f.str(to_string(split));
    for (const auto& id : ids) f.str(id);
  }
  return f.h;
}

DiscriminativeSets build_discriminative_sets(const StoryDataset& ds, std::size_t num_negatives, std::uint64_t seed) {
  std::map<std::vector<std::uint8_t>, std::vector<FrameRef>> by_label;
  for (std::size_t s = 0; s < ds.stories.size(); ++s)
    for (std::size_t k = 0; k < ds.stories[s].length(); ++k) by_label[ds.stories[s].char_labels[k]].push_back({s, k});

  std::mt19937_64 rng(seed);
  DiscriminativeSets out;
  for (std::size_t s = 0; s < ds.stories.size(); ++s) {
    const Story& story = ds.stories[s];
    const FrameRef target{s, story.length() - 1};
    std::vector<FrameRef> eligible;
    for (const auto& ref : by_label[story.char_labels.back()])
      if (ref.story != s) eligible.push_back(ref);
    if (eligible.size() < num_negatives) {
      out.skipped.push_back(story.id);
      continue;
    }
    // Partial Fisher-Yates: uniform sample without replacement.
    for (std::size_t i = 0; i < num_negatives; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
      std::swap(eligible[i], eligible[pick(rng)]);
    }
    DiscriminativeSet set;
    set.story_id = story.id;
    set.target = target;
    set.negatives.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(num_negatives));
    std::vector<std::size_t> order(num_negatives + 1);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      if (order[pos] == 0) {
        set.answer_index = pos;
        set.candidates.push_back(target);
      } else {
        set.candidates.push_back(set.negatives[order[pos] - 1]);
      }
    }
    out.sets.push_back(std::move(set));
  }
  return out;
}

}  // namespace duco::data
