// Regenerates the bundled toy corpus. Usage: toy_corpus_gen [path] [seed] [docs]
#include <cstdlib>
#include <iostream>

#include "blockrank/toy_corpus.hpp"

int main(int argc, char** argv) {
  std::string path = argc > 1 ? argv[1] : "data/toy_corpus.jsonl";
  uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 2024;
  int64_t docs = argc > 3 ? std::strtoll(argv[3], nullptr, 10) : 200;
  auto corpus = blockrank::make_toy_corpus(seed, docs);
  blockrank::write_documents_jsonl(corpus, path);
  std::cout << "wrote " << corpus.size() << " documents to " << path << "\n";
  return 0;
}
