#include "bifseg/maxflow.hpp"

#include <algorithm>
#include <stdexcept>

namespace bifseg {

MaxFlowGraph::MaxFlowGraph(int node_count, std::size_t edge_hint) {
  if (node_count < 0) throw std::invalid_argument("negative node count");
  nodes_.resize(static_cast<std::size_t>(node_count));
  arcs_.reserve(2 * edge_hint);
}

void MaxFlowGraph::add_terminal_weights(int node, double source_cap, double sink_cap) {
  if (source_cap < 0 || sink_cap < 0) throw std::invalid_argument("negative terminal capacity");
  Node& n = nodes_.at(static_cast<std::size_t>(node));
  const double delta = n.terminal_residual;
  if (delta > 0) {
    source_cap += delta;
  } else {
    sink_cap -= delta;
  }
  flow_ += std::min(source_cap, sink_cap);
  n.terminal_residual = source_cap - sink_cap;
  solved_ = false;
}

void MaxFlowGraph::add_edge(int i, int j, double cap, double rev_cap) {
  if (cap < 0 || rev_cap < 0) throw std::invalid_argument("negative edge capacity");
  if (i == j) throw std::invalid_argument("self loop");
  const int a = static_cast<int>(arcs_.size());
  arcs_.push_back({j, nodes_.at(static_cast<std::size_t>(i)).first, cap});
  nodes_[i].first = a;
  arcs_.push_back({i, nodes_.at(static_cast<std::size_t>(j)).first, rev_cap});
  nodes_[j].first = a + 1;
  solved_ = false;
}

void MaxFlowGraph::set_active(int node) {
  Node& n = nodes_[node];
  if (!n.active) {
    n.active = true;
    active_.push_back(node);
  }
}

int MaxFlowGraph::next_active() {
  while (!active_.empty()) {
    const int i = active_.front();
    active_.pop_front();
    nodes_[i].active = false;
    if (nodes_[i].parent != kNone) return i;
  }
  return kNone;
}

void MaxFlowGraph::set_orphan_front(int node) {
  nodes_[node].parent = kOrphan;
  orphans_.push_front(node);
}

void MaxFlowGraph::set_orphan_rear(int node) {
  nodes_[node].parent = kOrphan;
  orphans_.push_back(node);
}

void MaxFlowGraph::augment(int middle_arc) {
  double bottleneck = arcs_[middle_arc].residual;

  // source tree: parent arcs point from child to parent, flow runs parent -> child
  int i = arcs_[sister(middle_arc)].head;
  for (int a = nodes_[i].parent; a != kTerminal; a = nodes_[i].parent) {
    bottleneck = std::min(bottleneck, arcs_[sister(a)].residual);
    i = arcs_[a].head;
  }
  bottleneck = std::min(bottleneck, nodes_[i].terminal_residual);

  // sink tree: flow runs child -> parent
  i = arcs_[middle_arc].head;
  for (int a = nodes_[i].parent; a != kTerminal; a = nodes_[i].parent) {
    bottleneck = std::min(bottleneck, arcs_[a].residual);
    i = arcs_[a].head;
  }
  bottleneck = std::min(bottleneck, -nodes_[i].terminal_residual);

  arcs_[sister(middle_arc)].residual += bottleneck;
  arcs_[middle_arc].residual -= bottleneck;

  i = arcs_[sister(middle_arc)].head;
  while (true) {
    const int a = nodes_[i].parent;
    if (a == kTerminal) break;
    arcs_[a].residual += bottleneck;
    arcs_[sister(a)].residual -= bottleneck;
    if (arcs_[sister(a)].residual <= 0) set_orphan_front(i);
    i = arcs_[a].head;
  }
  nodes_[i].terminal_residual -= bottleneck;
  if (nodes_[i].terminal_residual <= 0) set_orphan_front(i);

  i = arcs_[middle_arc].head;
  while (true) {
    const int a = nodes_[i].parent;
    if (a == kTerminal) break;
    arcs_[sister(a)].residual += bottleneck;
    arcs_[a].residual -= bottleneck;
    if (arcs_[a].residual <= 0) set_orphan_front(i);
    i = arcs_[a].head;
  }
  nodes_[i].terminal_residual += bottleneck;
  if (nodes_[i].terminal_residual >= 0) set_orphan_front(i);

  flow_ += bottleneck;
}

void MaxFlowGraph::process_orphan(int i) {
  const bool sink_side = nodes_[i].in_sink;
  // Residual capacity usable to reach the terminal through neighbor j via arc a0 (i -> j).
  auto usable = [&](int a0) {
    return sink_side ? arcs_[a0].residual > 0 : arcs_[sister(a0)].residual > 0;
  };

  int best = kNone;
  int best_dist = kInfiniteDist;
  for (int a0 = nodes_[i].first; a0 != kNone; a0 = arcs_[a0].next) {
    if (!usable(a0)) continue;
    const int j = arcs_[a0].head;
    if (nodes_[j].in_sink != sink_side || nodes_[j].parent == kNone) continue;

    // Is j rooted at the terminal? Measure its distance on the way.
    int d = 0;
    int k = j;
    while (true) {
      if (nodes_[k].timestamp == time_) {
        d += nodes_[k].dist;
        break;
      }
      const int a = nodes_[k].parent;
      ++d;
      if (a == kTerminal) {
        nodes_[k].timestamp = time_;
        nodes_[k].dist = 1;
        break;
      }
      if (a == kOrphan) {
        d = kInfiniteDist;
        break;
      }
      k = arcs_[a].head;
    }
    if (d >= kInfiniteDist) continue;
    if (d < best_dist) {
      best = a0;
      best_dist = d;
    }
    for (k = j; nodes_[k].timestamp != time_; k = arcs_[nodes_[k].parent].head) {
      nodes_[k].timestamp = time_;
      nodes_[k].dist = d--;
    }
  }

  nodes_[i].parent = best;
  if (best != kNone) {
    nodes_[i].timestamp = time_;
    nodes_[i].dist = best_dist + 1;
    return;
  }

  // i becomes free: wake neighbors that could adopt it, orphan its children.
  for (int a0 = nodes_[i].first; a0 != kNone; a0 = arcs_[a0].next) {
    const int j = arcs_[a0].head;
    const int pj = nodes_[j].parent;
    if (nodes_[j].in_sink != sink_side || pj == kNone) continue;
    if (usable(a0)) set_active(j);
    if (pj != kTerminal && pj != kOrphan && arcs_[pj].head == i) set_orphan_rear(j);
  }
}

double MaxFlowGraph::maxflow() {
  if (solved_) return flow_;
  active_.clear();
  orphans_.clear();
  time_ = 0;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    n.active = false;
    n.timestamp = 0;
    if (n.terminal_residual != 0) {
      n.in_sink = n.terminal_residual < 0;
      n.parent = kTerminal;
      n.dist = 1;
      set_active(static_cast<int>(i));
    } else {
      n.parent = kNone;
      n.dist = 0;
    }
  }

  int current = kNone;
  while (true) {
    int i = current;
    if (i != kNone) {
      nodes_[i].active = false;
      if (nodes_[i].parent == kNone) i = kNone;
    }
    if (i == kNone) {
      i = next_active();
      if (i == kNone) break;
    }

    int middle = kNone;
    if (!nodes_[i].in_sink) {
      for (int a = nodes_[i].first; a != kNone; a = arcs_[a].next) {
        if (arcs_[a].residual <= 0) continue;
        const int j = arcs_[a].head;
        Node& nj = nodes_[j];
        if (nj.parent == kNone) {
          nj.in_sink = false;
          nj.parent = sister(a);
          nj.timestamp = nodes_[i].timestamp;
          nj.dist = nodes_[i].dist + 1;
          set_active(j);
        } else if (nj.in_sink) {
          middle = a;
          break;
        } else if (nj.timestamp <= nodes_[i].timestamp && nj.dist > nodes_[i].dist) {
          nj.parent = sister(a);
          nj.timestamp = nodes_[i].timestamp;
          nj.dist = nodes_[i].dist + 1;
        }
      }
    } else {
      for (int a = nodes_[i].first; a != kNone; a = arcs_[a].next) {
        if (arcs_[sister(a)].residual <= 0) continue;
        const int j = arcs_[a].head;
        Node& nj = nodes_[j];
        if (nj.parent == kNone) {
          nj.in_sink = true;
          nj.parent = sister(a);
          nj.timestamp = nodes_[i].timestamp;
          nj.dist = nodes_[i].dist + 1;
          set_active(j);
        } else if (!nj.in_sink) {
          middle = sister(a);
          break;
        } else if (nj.timestamp <= nodes_[i].timestamp && nj.dist > nodes_[i].dist) {
          nj.parent = sister(a);
          nj.timestamp = nodes_[i].timestamp;
          nj.dist = nodes_[i].dist + 1;
        }
      }
    }

    ++time_;
    if (middle != kNone) {
      nodes_[i].active = true;  // keep growing from i after the augmentation
      current = i;
      augment(middle);
      while (!orphans_.empty()) {
        const int o = orphans_.front();
        orphans_.pop_front();
        process_orphan(o);
      }
    } else {
      current = kNone;
    }
  }
  solved_ = true;
  return flow_;
}

MaxFlowGraph::Segment MaxFlowGraph::segment(int node) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(node));
  if (n.parent == kNone) return Segment::kSink;
  return n.in_sink ? Segment::kSink : Segment::kSource;
}

}  // namespace bifseg
