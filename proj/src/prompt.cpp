#include "fvlab/prompt.hpp"

#include <algorithm>
#include <fstream>

#include "fvlab/error.hpp"

namespace fvlab {

Vocabulary::Vocabulary() {
  const auto objects = object_names();
  for (int i = 0; i < kNumObjects; ++i) names_[static_cast<std::size_t>(i)] = std::string(objects[static_cast<std::size_t>(i)]);
  names_[token(Special::Bos)] = "<bos>";
  names_[token(Special::QMarker)] = "Q:";
  names_[token(Special::AMarker)] = "A:";
  names_[token(Special::Period)] = ".";
  names_[token(Special::Eoc)] = "<|endofchunk|>";
  names_[token(Special::ImgStart)] = "<image>";
  names_[token(Special::ImgEnd)] = "</image>";
  names_[token(Special::Pad)] = "<pad>";
}

std::string_view Vocabulary::name(TokenId id) const {
  if (id < 0 || id >= kVocabSize) throw LookupError("token id " + std::to_string(id) + " out of range");
  return names_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::id(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw LookupError("unknown token '" + std::string(name) + "'");
  return static_cast<TokenId>(it - names_.begin());
}

std::string Vocabulary::dump() const {
  std::string out;
  for (int i = 0; i < kVocabSize; ++i) {
    out += std::to_string(i);
    out += '\t';
    out += names_[static_cast<std::size_t>(i)];
    out += '\n';
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << dump();
}

const Vocabulary& default_vocabulary() {
  static const Vocabulary vocab;
  return vocab;
}

TokenId first_answer_token(ObjectId label, const Vocabulary& vocab) {
  return vocab.id(object_name(label));
}

TokenId first_answer_token(std::string_view label, const Vocabulary& vocab) {
  const TokenId id = vocab.id(label);
  if (!vocab.is_object(id)) throw LookupError("'" + std::string(label) + "' is not an object label");
  return id;
}

namespace {

void push_scene(std::vector<Element>& out, int scene_id) {
  out.push_back(Element::tok(Special::ImgStart));
  for (int s = 0; s < kObjectsPerScene; ++s) out.push_back(Element::scene_slot(scene_id, s));
  out.push_back(Element::tok(Special::ImgEnd));
}

}  // namespace

TokenSequence encode_prompt(const TaskInstance& task, int max_len, const Vocabulary& vocab) {
  const int length = prompt_length(task.shots());
  if (length > max_len) {
    throw SequenceTooLong("prompt of " + std::to_string(length) + " elements exceeds max_seq_len " +
                          std::to_string(max_len));
  }
  TokenSequence seq;
  seq.elements.reserve(static_cast<std::size_t>(length));
  seq.elements.push_back(Element::tok(Special::Bos));
  for (const Demo& d : task.demos) {
    push_scene(seq.elements, d.scene_id);
    seq.elements.push_back(Element::tok(Special::QMarker));
    seq.elements.push_back(Element::tok(first_answer_token(d.query, vocab)));
    seq.elements.push_back(Element::tok(Special::Period));
    seq.elements.push_back(Element::tok(Special::AMarker));
    seq.answer_positions.push_back(seq.size());
    seq.elements.push_back(Element::tok(first_answer_token(d.answer, vocab)));
    seq.elements.push_back(Element::tok(Special::Period));
    seq.elements.push_back(Element::tok(Special::Eoc));
  }
  push_scene(seq.elements, task.query.scene_id);
  seq.elements.push_back(Element::tok(Special::QMarker));
  seq.elements.push_back(Element::tok(first_answer_token(task.query.label, vocab)));
  seq.elements.push_back(Element::tok(Special::Period));
  seq.elements.push_back(Element::tok(Special::AMarker));
  seq.final_position = seq.size() - 1;
  seq.gold_token = first_answer_token(task.gold, vocab);
  return seq;
}

std::vector<int> prediction_positions(const TokenSequence& seq) {
  std::vector<int> out;
  out.reserve(seq.answer_positions.size() + 1);
  for (int p : seq.answer_positions) out.push_back(p - 1);
  out.push_back(seq.final_position);
  return out;
}

}  // namespace fvlab
