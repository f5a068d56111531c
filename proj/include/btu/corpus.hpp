#pragma once

// Text ingestion: tokenization, vocabulary, labelled examples, JSONL persistence.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace btu {

using TokenId = std::uint32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr std::string_view kPadSurface = "<pad>";
inline constexpr std::string_view kUnkSurface = "<unk>";

// Lowercased runs of non-space, non-punctuation bytes. Bytes >= 0x80 are word
// characters, so UTF-8 text passes through unsplit.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  // Just the reserved entries.
  Vocabulary();

  // surfaces[0] and surfaces[1] must be the pad and unk surfaces.
  static Vocabulary from_surfaces(std::vector<std::string> surfaces);

  std::size_t size() const { return surfaces_.size(); }
  const std::vector<std::string>& surfaces() const { return surfaces_; }
  const std::string& surface(TokenId id) const { return surfaces_.at(id); }

  std::optional<TokenId> find(std::string_view surface) const;
  TokenId id_or_unk(std::string_view surface) const;

  // Appends `surface` if absent; returns its id either way.
  TokenId add(std::string_view surface);

  std::set<TokenId> reserved_ids() const { return {kPadId, kUnkId}; }
  static bool is_reserved(TokenId id) { return id == kPadId || id == kUnkId; }

  bool operator==(const Vocabulary& other) const { return surfaces_ == other.surfaces_; }

 private:
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, TokenId> id_of_;
};

// pad, unk, then tokens with frequency >= min_freq by descending frequency, ties
// lexicographic.
Vocabulary build_vocab(std::span<const std::string> texts, int min_freq);

// Throws ValidationError("empty example") when the text has no tokens.
std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab);

struct Provenance {
  enum class Kind { clean, poisoned, negative_augmented, clean_inserted };
  Kind kind = Kind::clean;
  std::optional<int> trigger_id;
  std::optional<int> orig_label;

  bool is_clean() const { return kind == Kind::clean; }
  bool operator==(const Provenance&) const = default;
};

std::string_view to_string(Provenance::Kind kind);

struct Example {
  std::vector<TokenId> token_ids;
  int label = 0;
  Provenance meta;
  std::string source_text;

  bool operator==(const Example&) const = default;
};

Example make_example(std::string text, int label, const Vocabulary& vocab);

enum class Split { train, dev, test };
std::string_view to_string(Split split);

struct Dataset {
  std::vector<Example> examples;
  int num_classes = 2;
  Split split = Split::train;

  std::size_t size() const { return examples.size(); }
  bool operator==(const Dataset&) const = default;
};

// Checks labels and token ids against `vocab_size`; throws ValidationError.
void validate(const Dataset& dataset, std::size_t vocab_size);

// num_classes == 0 infers max(label) + 1 (at least 2).
Dataset read_jsonl(std::istream& in, const Vocabulary& vocab, int num_classes, Split split);
void write_jsonl(const Dataset& dataset, std::ostream& out);

Dataset load_jsonl(const std::filesystem::path& path, const Vocabulary& vocab, int num_classes,
                   Split split);
void save_jsonl(const Dataset& dataset, const std::filesystem::path& path);

// Raw (text, label) pairs, for building a vocabulary before encoding.
std::vector<std::string> read_jsonl_texts(const std::filesystem::path& path);

void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocab(const std::filesystem::path& path);

// Write to a sibling temp file, then rename over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace btu
