// Scores a few shapes-7 images with the attribute scorer and the template-prompt
// scorer on the toy backend, with no trained pattern.

#include <iostream>

#include "attrvr/attrvr.hpp"

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: zeroshot_demo <bank.json>\n";
    return 2;
  }
  using namespace attrvr;
  ToyDualEncoder backend;
  const AttributeBank bank = precompute_embeddings(load_bank(argv[1]), backend);
  const Dataset data = make_shapes7(4, 0);
  LabelScorer labels(backend, bank.classes);
  for (std::size_t i = 0; i < data.samples.size(); i += 4) {
    const auto& s = data.samples[i];
    const auto attr = attrzs_predict(s.pixels, bank, ScoreConfig{}, backend);
    const Tensor resized = resize_bilinear(s.pixels, 16, 16);
    const auto lab = predict(labels, backend.encode_image(resized));
    std::cout << data.class_names[s.label] << ": attributes say " << bank.classes[attr.label] << ", template says "
              << bank.classes[lab.label] << '\n';
  }
  return 0;
}
