#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "amx/autodiff.hpp"
#include "amx/errors.hpp"

namespace amx {

using TokenId = std::size_t;

// Vocabulary strings plus the frozen token-embedding table (V×d, row-major).
template <typename T>
class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> words, std::vector<T> table, std::size_t width, TokenId sos, TokenId eos,
             TokenId neutral)
      : words_(std::move(words)), table_(std::move(table)), width_(width), sos_(sos), eos_(eos), neutral_(neutral) {
    if (table_.size() != words_.size() * width_) throw ContractViolation("vocabulary table size mismatch");
    for (TokenId i = 0; i < words_.size(); ++i) index_.emplace(words_[i], i);
    if (sos_ >= size() || eos_ >= size() || neutral_ >= size()) throw ContractViolation("marker token out of range");
  }

  std::size_t size() const { return words_.size(); }
  std::size_t width() const { return width_; }
  TokenId sos() const { return sos_; }
  TokenId eos() const { return eos_; }
  TokenId neutral() const { return neutral_; }
  bool is_marker(TokenId id) const { return id == sos_ || id == eos_; }

  const std::string &word(TokenId id) const { return words_.at(id); }
  const std::vector<std::string> &words() const { return words_; }
  const std::vector<T> &table() const { return table_; }

  std::vector<T> embedding(TokenId id) const {
    if (id >= size()) throw Rejected("token index " + std::to_string(id) + " outside vocabulary");
    return {table_.begin() + id * width_, table_.begin() + (id + 1) * width_};
  }

  TokenId lookup(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw Rejected("unknown vocabulary token '" + std::string(word) + "'");
    return it->second;
  }

  // Whitespace tokenization; markers are not added.
  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> ids;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) ids.push_back(lookup(w));
    return ids;
  }

 private:
  std::vector<std::string> words_;
  std::vector<T> table_;
  std::size_t width_;
  TokenId sos_, eos_, neutral_;
  std::unordered_map<std::string, TokenId> index_;
};

struct FixedSlot {
  TokenId token;
};
struct LearnableSlot {
  std::size_t index;
};
using Slot = std::variant<FixedSlot, LearnableSlot>;

// Token sequence mixing frozen vocabulary tokens with learnable embedding slots.
class PromptTemplate {
 public:
  PromptTemplate() = default;
  explicit PromptTemplate(std::vector<Slot> slots) : slots_(std::move(slots)) {
    std::size_t next = 0;
    for (const auto &s : slots_) {
      if (const auto *l = std::get_if<LearnableSlot>(&s)) {
        if (l->index != next) throw ContractViolation("learnable slots must be numbered in order from 0");
        ++next;
      }
    }
    learnable_ = next;
  }

  // [SOS, prefix tokens..., slot_0 .. slot_{n-1}, EOS]
  template <typename T>
  static PromptTemplate with_prefix(const Vocabulary<T> &vocab, std::string_view prefix, std::size_t learnable) {
    std::vector<Slot> slots{FixedSlot{vocab.sos()}};
    for (TokenId id : vocab.tokenize(prefix)) slots.emplace_back(FixedSlot{id});
    for (std::size_t i = 0; i < learnable; ++i) slots.emplace_back(LearnableSlot{i});
    slots.emplace_back(FixedSlot{vocab.eos()});
    return PromptTemplate(std::move(slots));
  }

  const std::vector<Slot> &slots() const { return slots_; }
  std::size_t length() const { return slots_.size(); }
  std::size_t learnable_count() const { return learnable_; }

  template <typename T>
  void validate(const Vocabulary<T> &vocab) const {
    if (slots_.size() < 2) throw ContractViolation("prompt template needs SOS/EOS framing");
    const auto *first = std::get_if<FixedSlot>(&slots_.front());
    const auto *last = std::get_if<FixedSlot>(&slots_.back());
    if (!first || first->token != vocab.sos() || !last || last->token != vocab.eos())
      throw ContractViolation("prompt template must start with SOS and end with EOS");
    for (const auto &s : slots_)
      if (const auto *f = std::get_if<FixedSlot>(&s); f && f->token >= vocab.size())
        throw Rejected("template token index " + std::to_string(f->token) + " outside vocabulary");
  }

  // Text of the fixed tokens with each learnable slot replaced by `fill[i]`.
  template <typename T>
  std::string render(const Vocabulary<T> &vocab, const std::vector<TokenId> &fill) const {
    std::string out;
    for (const auto &s : slots_) {
      TokenId id;
      if (const auto *f = std::get_if<FixedSlot>(&s)) {
        if (vocab.is_marker(f->token)) continue;
        id = f->token;
      } else {
        id = fill.at(std::get<LearnableSlot>(s).index);
      }
      if (!out.empty()) out += ' ';
      out += vocab.word(id);
    }
    return out;
  }

 private:
  std::vector<Slot> slots_;
  std::size_t learnable_ = 0;
};

// N×d embedding matrix with a per-row learnable flag.
template <typename T>
struct EmbeddingSequence {
  ad::Var<T> rows;
  std::vector<bool> learnable;

  std::size_t length() const { return rows.rows(); }
  std::size_t width() const { return rows.cols(); }
};

// Fills fixed slots from the vocabulary table and learnable slots from the
// rows of `learnable` (L×d). Frozen rows are exact copies of table rows.
template <typename T>
EmbeddingSequence<T> encode_prompt(const Vocabulary<T> &vocab, const PromptTemplate &tmpl,
                                   const ad::Var<T> &learnable) {
  if (learnable.defined() ? learnable.rows() != tmpl.learnable_count() : tmpl.learnable_count() != 0)
    throw ContractViolation("encode_prompt: template has " + std::to_string(tmpl.learnable_count()) +
                            " learnable slots but " + std::to_string(learnable.defined() ? learnable.rows() : 0) +
                            " rows were supplied");
  if (learnable.defined() && learnable.rows() > 0 && learnable.cols() != vocab.width())
    throw ContractViolation("encode_prompt: learnable rows have width " + std::to_string(learnable.cols()) +
                            ", vocabulary width is " + std::to_string(vocab.width()));
  std::vector<ad::Var<T>> rows;
  std::vector<bool> flags;
  for (const auto &s : tmpl.slots()) {
    if (const auto *f = std::get_if<FixedSlot>(&s)) {
      rows.push_back(ad::constant(vocab.embedding(f->token), 1, vocab.width()));
      flags.push_back(false);
    } else {
      rows.push_back(ad::row(learnable, std::get<LearnableSlot>(s).index));
      flags.push_back(true);
    }
  }
  return {ad::stack_rows(rows), std::move(flags)};
}

// Variant where each learnable slot is supplied as its own 1×d row.
template <typename T>
EmbeddingSequence<T> encode_prompt_rows(const Vocabulary<T> &vocab, const PromptTemplate &tmpl,
                                        const std::vector<ad::Var<T>> &slot_rows) {
  if (slot_rows.size() != tmpl.learnable_count())
    throw ContractViolation("encode_prompt: template has " + std::to_string(tmpl.learnable_count()) +
                            " learnable slots but " + std::to_string(slot_rows.size()) + " rows were supplied");
  std::vector<ad::Var<T>> rows;
  std::vector<bool> flags;
  for (const auto &s : tmpl.slots()) {
    if (const auto *f = std::get_if<FixedSlot>(&s)) {
      rows.push_back(ad::constant(vocab.embedding(f->token), 1, vocab.width()));
      flags.push_back(false);
    } else {
      const auto &r = slot_rows[std::get<LearnableSlot>(s).index];
      if (r.rows() != 1 || r.cols() != vocab.width()) throw ContractViolation("encode_prompt: slot row shape");
      rows.push_back(r);
      flags.push_back(true);
    }
  }
  return {ad::stack_rows(rows), std::move(flags)};
}

// Plain text prompt with SOS/EOS framing and no learnable slots.
template <typename T>
EmbeddingSequence<T> encode_text(const Vocabulary<T> &vocab, std::string_view text) {
  auto tmpl = PromptTemplate::with_prefix(vocab, text, 0);
  return encode_prompt(vocab, tmpl, ad::Var<T>{});
}

}  // namespace amx
