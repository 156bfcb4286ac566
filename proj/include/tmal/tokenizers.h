#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "tmal/common.h"

namespace tmal {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;

// Fixed-length token sequence. mask[i] is true for real tokens, which always
// form a contiguous prefix; ids are PAD everywhere else.
struct TokenSeq {
  std::vector<std::int32_t> ids;
  std::vector<bool> mask;

  std::size_t real_length() const;
  bool operator==(const TokenSeq&) const = default;
};

// Total vocabulary over {A,C,G,T}^k plus PAD/UNK. k-mer ids follow
// lexicographic order (A<C<G<T) starting at 2.
class KmerVocab {
 public:
  explicit KmerVocab(int k);

  int k() const { return k_; }
  std::size_t size() const { return (std::size_t{1} << (2 * k_)) + 2; }
  // UNK for any k-mer holding a non-ACGT character (after upper-casing).
  std::int32_t id_of(std::string_view kmer) const;
  std::string token_of(std::int32_t id) const;

  void write(std::ostream& out) const;

 private:
  int k_;
};

struct TokenizeResult {
  TokenSeq seq;
  // Set when nothing survived truncation; the sequence is all PAD.
  bool empty_warning = false;
};

// Non-overlapping k-mers over the first max_len_nt nucleotides; a trailing
// remainder shorter than k is dropped. Output length is max_len_nt / k.
TokenizeResult tokenize_dna(std::string_view barcode, const KmerVocab& vocab,
                            std::size_t max_len_nt);

class WordVocab {
 public:
  WordVocab();  // specials only
  // Specials followed by the sorted unique whitespace-split words.
  static WordVocab build(const std::vector<std::string>& corpus);
  static WordVocab read(std::istream& in);

  std::size_t size() const { return words_.size(); }
  std::int32_t id_of(const std::string& word) const;
  const std::string& token_of(std::int32_t id) const { return words_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return words_; }

  void write(std::ostream& out) const;
  bool operator==(const WordVocab& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::int32_t, std::less<>> ids_;
};

TokenSeq tokenize_text(std::string_view text, const WordVocab& vocab, std::size_t max_len);

std::vector<std::string> split_whitespace(std::string_view text);

}  // namespace tmal
