

class OpsCounter:
    def __init__(self, name):
        self.name = name
        self.value = 0

    def get(self):
        return self.value

    def inc(self, delta):
        self.value += delta
        return self


class TypeStats:
    """
    Correct / total counters per question type, in a fixed type order
    """
    def __init__(self, name, types):
        self.name = name
        self.types = list(types)

        self.correct = {t: OpsCounter(f"{t}.correct") for t in self.types}
        self.total = {t: OpsCounter(f"{t}.total") for t in self.types}

    def add(self, qtype, correct, total=1):
        if qtype not in self.total:
            self.types.append(qtype)
            self.correct[qtype] = OpsCounter(f"{qtype}.correct")
            self.total[qtype] = OpsCounter(f"{qtype}.total")

        self.correct[qtype].inc(int(correct))
        self.total[qtype].inc(int(total))
        return self

    def merge(self, other):
        for t in other.types:
            self.add(t, other.correct[t].get(), other.total[t].get())
        return self

    def counts(self):
        return {t: (self.correct[t].get(), self.total[t].get()) for t in self.types}
