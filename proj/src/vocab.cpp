#include "mp/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace mp {

Vocab::Vocab() {
  reserved_names_ = {"<pad>", "<unk>", "<mask>", "<len>", "<s>", "</s>"};
}

Vocab Vocab::build(const std::vector<std::vector<std::string>>& sentences) {
  std::map<std::string, long> freq;  // ordered map: lexicographic tie-break for free
  for (const auto& s : sentences)
    for (const auto& tok : s) ++freq[tok];

  std::vector<std::pair<std::string, long>> order(freq.begin(), freq.end());
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocab v;
  for (const auto& [tok, n] : order) v.add(tok);
  return v;
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open vocabulary file: " + path);
  Vocab v;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw DataError("empty token line in vocabulary file: " + path);
    v.add(line);
  }
  return v;
}

void Vocab::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write vocabulary file: " + path);
  for (const auto& tok : content_) os << tok << "\n";
}

int Vocab::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? UNK : it->second;
}

const std::string& Vocab::token_of(int id) const {
  if (id < 0 || id >= size()) throw DataError("token id out of range: " + std::to_string(id));
  if (id < reserved_count) return reserved_names_[static_cast<std::size_t>(id)];
  return content_[static_cast<std::size_t>(id - reserved_count)];
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id_of(t));
  return ids;
}

std::vector<std::string> Vocab::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(token_of(id));
  return out;
}

int Vocab::add(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  const int id = size();
  content_.push_back(token);
  token_to_id_.emplace(token, id);
  return id;
}

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace mp
