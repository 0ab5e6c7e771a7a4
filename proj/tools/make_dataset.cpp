// Writes the procedurally generated shapes corpus to disk in the CIFAR
// binary batch layout, so the standard ingestion path can be exercised (and
// experiments can run against files when no real corpus is available).

#include <CLI11.hpp>
#include <iostream>

#include "metadd/io/synthgen.hpp"

int main(int argc, char** argv) {
  CLI::App app{"generate the shapes corpus in CIFAR binary layout"};
  std::string out = "data/shapes";
  long long classes = 3, train_per_class = 1000, val_per_class = 200;
  unsigned long long seed = 0;
  app.add_option("--out", out, "output directory");
  app.add_option("--classes", classes, "number of classes (2..10)");
  app.add_option("--train-per-class", train_per_class, "training images per class");
  app.add_option("--val-per-class", val_per_class, "validation images per class");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);
  try {
    auto ds = metadd::io::generate_shapes_dataset(classes, train_per_class,
                                                  val_per_class, 32, seed);
    metadd::io::write_cifar_layout(ds, out);
    std::cout << "wrote " << ds.train.size() << " train / " << ds.val.size()
              << " val images (" << classes << " classes) to " << out << "\n";
  } catch (const metadd::Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
