#pragma once

// Story datasets: the in-memory model, the Pororo-SV on-disk layout, the
// ShapeStories synthetic generator and discriminative candidate sets.
//
// On-disk layout (shared by real Pororo-SV exports and ShapeStories):
//   <root>/frames/<story_id>/<k>.png   k = 0..T-1
//   <root>/captions.jsonl              {"story_id": ..., "captions": [T strings]}
//   <root>/labels.jsonl                {"story_id": ..., "labels": [T binary vectors]}
//   <root>/splits.json                 {"train": [...], "val": [...], "test": [...]}
//   <root>/characters.json             optional ordered character names

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace duco::data {

// Planar RGB image [3, H, W]; values in [-1, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  static Image blank(std::size_t height, std::size_t width, double fill = -1.0) {
    return {height, width, std::vector<double>(3 * height * width, fill)};
  }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

inline constexpr std::int64_t kPad = 0;
inline constexpr std::int64_t kBos = 1;
inline constexpr std::int64_t kEos = 2;

// Closed token vocabulary; ids 0..2 are <pad>, <bos>, <eos>.
class Vocab {
 public:
  Vocab();
  static Vocab build(const std::vector<std::string>& texts);

  std::int64_t id(const std::string& token) const;  // throws std::out_of_range on OOV
  const std::string& token(std::int64_t id) const;
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::uint64_t hash() const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::int64_t> index_;
};

std::vector<std::string> tokenize(const std::string& text);

struct Caption {
  std::string text;
  std::vector<std::int64_t> ids;  // padded to max_len with kPad
  std::size_t length = 0;         // unpadded tokens, >= 1

  std::vector<std::uint8_t> mask() const;
};

Caption encode_caption(const Vocab& vocab, const std::string& text, std::size_t max_len);
std::string decode_ids(const Vocab& vocab, const std::vector<std::int64_t>& ids);

struct Story {
  std::string id;
  std::vector<Image> frames;
  std::vector<Caption> captions;
  std::vector<std::vector<std::uint8_t>> char_labels;

  std::size_t length() const { return frames.size(); }
};

enum class Split { train, val, test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct StoryDataset {
  std::vector<Story> stories;  // sorted by story id
  Split split = Split::train;
  Vocab vocab;
  std::vector<std::string> char_names;
  std::size_t max_len = 24;

  std::size_t frames_per_story() const { return stories.empty() ? 0 : stories.front().length(); }
};

// Every split of one dataset sharing one vocabulary.
struct StoryCorpus {
  std::vector<Story> stories;
  std::map<Split, std::vector<std::string>> splits;
  Vocab vocab;
  std::vector<std::string> char_names;
  std::size_t max_len = 24;

  StoryDataset select(Split split) const;
};

// Throws DataIntegrityError naming the story on any violated invariant.
void validate_story(const Story& story, std::size_t num_characters);

struct LoadOptions {
  std::size_t image_size = 32;
  std::size_t max_len = 24;
};

// Reads the full layout (vocabulary is built over every split).
StoryCorpus load_corpus(const std::filesystem::path& root, const LoadOptions& options = {});
StoryDataset load_pororo_sv(const std::filesystem::path& root, Split split, const LoadOptions& options = {});
void export_pororo_sv(const StoryCorpus& corpus, const std::filesystem::path& root);

// Default Pororo-SV roster used when characters.json is absent.
const std::vector<std::string>& pororo_characters();

struct SynthConfig {
  std::size_t num_stories = 2000;
  std::size_t frames_per_story = 5;
  std::size_t image_size = 32;
  std::size_t max_len = 24;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
};

struct ShapeCharacter {
  std::string name;
  std::string shape;
  std::uint8_t rgb[3];
  double weight;  // relative frequency when casting stories
};

const std::vector<ShapeCharacter>& shape_characters();
const std::vector<std::string>& shape_settings();

// Deterministic in (cfg, seed).
StoryCorpus generate_shape_stories(const SynthConfig& cfg, std::uint64_t seed);

// Renders a ShapeStories frame from its caption text alone.
Image render_caption(const std::string& caption, std::size_t image_size);
// Character presence implied by a ShapeStories caption.
std::vector<std::uint8_t> labels_from_caption(const std::string& caption);

// FNV-1a over every story field; equal corpora hash equal.
std::uint64_t fingerprint(const StoryCorpus& corpus);

struct FrameRef {
  std::size_t story = 0;  // index into StoryDataset::stories
  std::size_t frame = 0;
};

struct DiscriminativeSet {
  std::string story_id;
  FrameRef target;                   // the story's final frame
  std::vector<FrameRef> negatives;   // same final-frame label vector, other stories
  std::vector<FrameRef> candidates;  // target + negatives after shuffling
  std::size_t answer_index = 0;      // candidates[answer_index] == target
};

struct DiscriminativeSets {
  std::vector<DiscriminativeSet> sets;
  std::vector<std::string> skipped;  // stories with too few eligible negatives
};

DiscriminativeSets build_discriminative_sets(const StoryDataset& ds, std::size_t num_negatives, std::uint64_t seed);

inline const Image& resolve(const StoryDataset& ds, const FrameRef& ref) {
  return ds.stories.at(ref.story).frames.at(ref.frame);
}

}  // namespace duco::data
