#include "tmal/tokenizers.h"

#include <algorithm>
#include <cctype>
#include <istream>
#include <ostream>
#include <set>

namespace tmal {
namespace {

int base_code(char c) {
  switch (std::toupper(static_cast<unsigned char>(c))) {
    case 'A':
      return 0;
    case 'C':
      return 1;
    case 'G':
      return 2;
    case 'T':
      return 3;
    default:
      return -1;
  }
}

TokenSeq padded(std::vector<std::int32_t> real, std::size_t length) {
  TokenSeq seq;
  seq.ids.assign(length, kPadId);
  seq.mask.assign(length, false);
  const std::size_t n = std::min(real.size(), length);
  for (std::size_t i = 0; i < n; ++i) {
    seq.ids[i] = real[i];
    seq.mask[i] = true;
  }
  return seq;
}

}  // namespace

std::size_t TokenSeq::real_length() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

KmerVocab::KmerVocab(int k) : k_(k) {
  if (k < 1 || k > 12) throw UsageError("k-mer length must be in [1, 12]");
}

std::int32_t KmerVocab::id_of(std::string_view kmer) const {
  if (kmer.size() != static_cast<std::size_t>(k_)) return kUnkId;
  std::int32_t code = 0;
  for (char c : kmer) {
    const int b = base_code(c);
    if (b < 0) return kUnkId;
    code = code * 4 + b;
  }
  return code + 2;
}

std::string KmerVocab::token_of(std::int32_t id) const {
  if (id == kPadId) return "[PAD]";
  if (id == kUnkId) return "[UNK]";
  if (id < 0 || static_cast<std::size_t>(id) >= size()) throw UsageError("k-mer id out of range");
  static constexpr char kBases[4] = {'A', 'C', 'G', 'T'};
  std::string s(static_cast<std::size_t>(k_), 'A');
  std::int32_t code = id - 2;
  for (int i = k_ - 1; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kBases[code % 4];
    code /= 4;
  }
  return s;
}

void KmerVocab::write(std::ostream& out) const {
  for (std::size_t id = 0; id < size(); ++id) {
    out << token_of(static_cast<std::int32_t>(id)) << '\t' << id << '\n';
  }
}

TokenizeResult tokenize_dna(std::string_view barcode, const KmerVocab& vocab,
                            std::size_t max_len_nt) {
  const auto k = static_cast<std::size_t>(vocab.k());
  if (max_len_nt < k) throw UsageError("max_len_nt must be >= k");
  const std::string_view kept = barcode.substr(0, std::min(barcode.size(), max_len_nt));
  std::vector<std::int32_t> ids;
  ids.reserve(kept.size() / k);
  for (std::size_t pos = 0; pos + k <= kept.size(); pos += k) {
    ids.push_back(vocab.id_of(kept.substr(pos, k)));
  }
  TokenizeResult result;
  result.empty_warning = ids.empty();
  result.seq = padded(std::move(ids), max_len_nt / k);
  return result;
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

WordVocab::WordVocab() : words_{"[PAD]", "[UNK]"} {
  ids_.emplace("[PAD]", kPadId);
  ids_.emplace("[UNK]", kUnkId);
}

WordVocab WordVocab::build(const std::vector<std::string>& corpus) {
  if (corpus.empty()) throw UsageError("word vocabulary needs a non-empty corpus");
  std::set<std::string> unique;
  for (const auto& text : corpus) {
    for (auto& w : split_whitespace(text)) unique.insert(std::move(w));
  }
  WordVocab v;
  for (const auto& w : unique) {
    if (v.ids_.count(w)) continue;
    v.ids_.emplace(w, static_cast<std::int32_t>(v.words_.size()));
    v.words_.push_back(w);
  }
  return v;
}

std::int32_t WordVocab::id_of(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnkId : it->second;
}

void WordVocab::write(std::ostream& out) const {
  for (std::size_t id = 0; id < words_.size(); ++id) out << words_[id] << '\t' << id << '\n';
}

WordVocab WordVocab::read(std::istream& in) {
  WordVocab v;
  v.words_.clear();
  v.ids_.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw DataError("vocab: expected token<TAB>id");
    const std::string token = line.substr(0, tab);
    const auto id = static_cast<std::int32_t>(std::stol(line.substr(tab + 1)));
    if (id != static_cast<std::int32_t>(v.words_.size())) throw DataError("vocab: ids not dense");
    v.ids_.emplace(token, id);
    v.words_.push_back(token);
  }
  if (v.words_.size() < 2 || v.words_[0] != "[PAD]" || v.words_[1] != "[UNK]") {
    throw DataError("vocab: missing [PAD]/[UNK] specials");
  }
  return v;
}

TokenSeq tokenize_text(std::string_view text, const WordVocab& vocab, std::size_t max_len) {
  if (max_len < 1) throw UsageError("text max_len must be >= 1");
  std::vector<std::int32_t> ids;
  for (const auto& w : split_whitespace(text)) ids.push_back(vocab.id_of(w));
  return padded(std::move(ids), max_len);
}

}  // namespace tmal
