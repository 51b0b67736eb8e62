#pragma once

#include <cstdint>
#include <deque>
#include <vector>

namespace bifseg {

/// Boykov-Kolmogorov augmenting-path max-flow for s-t graphs with terminal
/// links on every node. Suited to grid graphs: search trees are reused
/// between augmentations instead of being rebuilt.
class MaxFlowGraph {
 public:
  enum class Segment { kSource, kSink };

  explicit MaxFlowGraph(int node_count, std::size_t edge_hint = 0);

  int node_count() const { return static_cast<int>(nodes_.size()); }

  /// Adds source->node and node->sink capacities (accumulating).
  void add_terminal_weights(int node, double source_cap, double sink_cap);
  /// Adds an arc pair i->j with capacity `cap` and j->i with `rev_cap`.
  void add_edge(int i, int j, double cap, double rev_cap);

  double maxflow();

  /// Side of the minimum cut. Nodes not connected to either tree go to the sink.
  Segment segment(int node) const;

 private:
  static constexpr int kNone = -1;
  static constexpr int kTerminal = -2;
  static constexpr int kOrphan = -3;
  static constexpr int kInfiniteDist = 1 << 30;

  struct Arc {
    int head;
    int next;
    double residual;
  };

  struct Node {
    int first = kNone;
    int parent = kNone;  // arc index, or kNone / kTerminal / kOrphan
    double terminal_residual = 0.0;  // > 0: from source, < 0: to sink
    std::int64_t timestamp = 0;
    int dist = 0;
    bool in_sink = false;
    bool active = false;
  };

  static int sister(int arc) { return arc ^ 1; }

  void set_active(int node);
  int next_active();
  void set_orphan_front(int node);
  void set_orphan_rear(int node);
  void augment(int middle_arc);
  void process_orphan(int node);

  std::vector<Node> nodes_;
  std::vector<Arc> arcs_;
  std::deque<int> active_;
  std::deque<int> orphans_;
  double flow_ = 0.0;
  std::int64_t time_ = 0;
  bool solved_ = false;
};

}  // namespace bifseg
