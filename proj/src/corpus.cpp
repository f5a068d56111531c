#include "btu/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "btu/error.hpp"

namespace btu {

using nlohmann::ordered_json;

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (const char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    const bool separator = c < 0x80 && (std::isspace(c) || std::ispunct(c) || std::iscntrl(c));
    if (separator) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : raw);
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Vocabulary::Vocabulary() {
  add(kPadSurface);
  add(kUnkSurface);
}

Vocabulary Vocabulary::from_surfaces(std::vector<std::string> surfaces) {
  if (surfaces.size() < 2 || surfaces[0] != kPadSurface || surfaces[1] != kUnkSurface) {
    throw ValidationError("vocabulary must start with <pad>, <unk>");
  }
  Vocabulary vocab;
  for (std::size_t i = 2; i < surfaces.size(); ++i) {
    if (vocab.find(surfaces[i])) throw ValidationError("duplicate vocabulary entry: " + surfaces[i]);
    vocab.add(surfaces[i]);
  }
  return vocab;
}

std::optional<TokenId> Vocabulary::find(std::string_view surface) const {
  const auto it = id_of_.find(std::string(surface));
  if (it == id_of_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id_or_unk(std::string_view surface) const { return find(surface).value_or(kUnkId); }

TokenId Vocabulary::add(std::string_view surface) {
  if (const auto existing = find(surface)) return *existing;
  const auto id = static_cast<TokenId>(surfaces_.size());
  surfaces_.emplace_back(surface);
  id_of_.emplace(surfaces_.back(), id);
  return id;
}

Vocabulary build_vocab(std::span<const std::string> texts, int min_freq) {
  if (texts.empty()) throw ValidationError("empty corpus");
  if (min_freq < 1) throw ValidationError("min_freq must be positive");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    for (auto& token : tokenize(text)) ++counts[std::move(token)];
  }
  if (counts.empty()) throw ValidationError("empty corpus");

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // std::map iteration is already lexicographic; a stable sort keeps that order for ties.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary vocab;
  for (const auto& [surface, count] : ranked) {
    if (count < static_cast<std::size_t>(min_freq)) break;
    if (surface == kPadSurface || surface == kUnkSurface) continue;
    vocab.add(surface);
  }
  return vocab;
}

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab) {
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw ValidationError("empty example");
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& token : tokens) ids.push_back(vocab.id_or_unk(token));
  return ids;
}

std::string_view to_string(Provenance::Kind kind) {
  switch (kind) {
    case Provenance::Kind::clean: return "clean";
    case Provenance::Kind::poisoned: return "poisoned";
    case Provenance::Kind::negative_augmented: return "negative_augmented";
    case Provenance::Kind::clean_inserted: return "clean_inserted";
  }
  return "clean";
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "train";
}

Example make_example(std::string text, int label, const Vocabulary& vocab) {
  Example ex;
  ex.token_ids = encode(text, vocab);
  ex.label = label;
  ex.source_text = std::move(text);
  return ex;
}

void validate(const Dataset& dataset, std::size_t vocab_size) {
  if (dataset.examples.empty()) throw ValidationError("empty dataset");
  if (dataset.num_classes < 1) throw ValidationError("num_classes must be positive");
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    const auto& ex = dataset.examples[i];
    if (ex.label < 0 || ex.label >= dataset.num_classes) {
      throw ValidationError("example " + std::to_string(i) + ": label out of range");
    }
    if (ex.token_ids.empty()) throw ValidationError("example " + std::to_string(i) + ": empty example");
    for (const TokenId id : ex.token_ids) {
      if (id >= vocab_size) throw ValidationError("example " + std::to_string(i) + ": token id out of range");
    }
  }
}

namespace {

Provenance::Kind parse_kind(const std::string& s) {
  if (s == "clean") return Provenance::Kind::clean;
  if (s == "poisoned") return Provenance::Kind::poisoned;
  if (s == "negative_augmented") return Provenance::Kind::negative_augmented;
  if (s == "clean_inserted") return Provenance::Kind::clean_inserted;
  throw ValidationError("unknown provenance: " + s);
}

Example parse_line(const std::string& line, const Vocabulary& vocab) {
  const auto obj = ordered_json::parse(line);
  if (!obj.is_object()) throw ValidationError("expected a JSON object");
  if (!obj.contains("text") || !obj["text"].is_string()) throw ValidationError("missing string field \"text\"");
  if (!obj.contains("label") || !obj["label"].is_number_integer()) {
    throw ValidationError("missing integer field \"label\"");
  }
  Example ex = make_example(obj["text"].get<std::string>(), obj["label"].get<int>(), vocab);

  const bool poisoned = obj.contains("poisoned") && obj["poisoned"].get<bool>();
  if (obj.contains("provenance")) {
    ex.meta.kind = parse_kind(obj["provenance"].get<std::string>());
  } else if (poisoned) {
    ex.meta.kind = Provenance::Kind::poisoned;
  }
  if (obj.contains("trigger_id")) ex.meta.trigger_id = obj["trigger_id"].get<int>();
  if (obj.contains("orig_label")) ex.meta.orig_label = obj["orig_label"].get<int>();
  return ex;
}

}  // namespace

Dataset read_jsonl(std::istream& in, const Vocabulary& vocab, int num_classes, Split split) {
  Dataset dataset;
  dataset.split = split;
  std::string line;
  std::size_t line_no = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto ex = parse_line(line, vocab);
      if (ex.label < 0) throw ValidationError("negative label");
      if (num_classes > 0 && ex.label >= num_classes) {
        throw ValidationError("label " + std::to_string(ex.label) + " >= num_classes " + std::to_string(num_classes));
      }
      max_label = std::max(max_label, ex.label);
      dataset.examples.push_back(std::move(ex));
    } catch (const std::exception& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (dataset.examples.empty()) throw ValidationError("empty dataset");
  dataset.num_classes = num_classes > 0 ? num_classes : std::max(2, max_label + 1);
  return dataset;
}

void write_jsonl(const Dataset& dataset, std::ostream& out) {
  for (const auto& ex : dataset.examples) {
    ordered_json obj;
    obj["text"] = ex.source_text;
    obj["label"] = ex.label;
    switch (ex.meta.kind) {
      case Provenance::Kind::clean:
        break;
      case Provenance::Kind::poisoned:
        obj["poisoned"] = true;
        break;
      case Provenance::Kind::negative_augmented:
      case Provenance::Kind::clean_inserted:
        obj["poisoned"] = false;
        obj["provenance"] = std::string(to_string(ex.meta.kind));
        break;
    }
    if (ex.meta.trigger_id) obj["trigger_id"] = *ex.meta.trigger_id;
    if (ex.meta.orig_label) obj["orig_label"] = *ex.meta.orig_label;
    out << obj.dump() << '\n';
  }
}

Dataset load_jsonl(const std::filesystem::path& path, const Vocabulary& vocab, int num_classes, Split split) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  return read_jsonl(in, vocab, num_classes, split);
}

void save_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
  std::ostringstream out;
  write_jsonl(dataset, out);
  write_file_atomic(path, out.str());
}

std::vector<std::string> read_jsonl_texts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<std::string> texts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      texts.push_back(ordered_json::parse(line).at("text").get<std::string>());
    } catch (const std::exception& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return texts;
}

void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
  write_file_atomic(path, ordered_json(vocab.surfaces()).dump() + "\n");
}

Vocabulary load_vocab(const std::filesystem::path& path) {
  try {
    return Vocabulary::from_surfaces(ordered_json::parse(read_file(path)).get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace btu
